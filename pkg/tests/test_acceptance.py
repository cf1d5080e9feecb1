"""Acceptance gate: the nine shipping criteria, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see every verdict line;
without ``-s`` the lines still appear for any failing criterion. Tolerances
and runtime budgets are asserted, not just reported.
"""

import json
import time

import numpy as np
import pytest

from volcon.augmentation import AugmentationPolicy
from volcon.cli import main as cli_main
from volcon.contrastive import (
    EmbeddingBatch,
    simclr_loss,
    supcon_gradient,
    supcon_loss,
)
from volcon.errors import DegenerateBatchError
from volcon.evaluation import (
    ConfusionMatrix,
    class_iou,
    evaluate_splits,
    mean_iou,
    pixel_accuracy,
    predict_slice,
    update_confusion,
)
from volcon.models import (
    EncoderSpec,
    ProjectionHeadSpec,
    SegmentationHeadSpec,
    load_segmentation_bundle,
)
from volcon.training import (
    OptimizerConfig,
    StageConfig,
    finetune_segmentation,
    initialize_checkpoint,
    pretrain_contrastive,
)
from volcon.volume_data import (
    SyntheticVolumeConfig,
    assign_volume_labels,
    build_test_splits,
    compute_normalization_stats,
    extract_crosslines,
    generate_synthetic_volume,
)

from .oracles import (
    central_difference_gradient,
    confusion_double_loop,
    labels_with_a_positive,
    ntxent_double_loop,
    random_unit_rows,
    supcon_double_loop,
)


def _verdict(tag: str, ok: bool, detail: str = ""):
    print(f"[ACCEPTANCE {tag}] {'PASS' if ok else 'FAIL'}"
          f"{' - ' + detail if detail else ''}")
    assert ok, f"acceptance {tag} failed: {detail}"


# --------------------------------------------------------------- desk config

DESK_ENCODER = EncoderSpec(family="tiny", input_channels=1, output_stride=8)
DESK_PROJECTION = ProjectionHeadSpec(in_dim=64, hidden_dim=64, out_dim=32)
DESK_HEAD = SegmentationHeadSpec(in_channels=64, num_classes=3, variant="tiny")
DESK_DIMS = (32, 64, 64)  # 64 crosslines of 32x64 slices
DESK_PARTITIONS = 8
DESK_BATCH = 16
PRETRAIN_LR = 0.05
FINETUNE_LR = 0.1


def desk_policies(stats):
    contrastive = AugmentationPolicy(
        crop_size=32,
        crop_scale=(0.5, 1.0),
        flip_probability=0.5,
        jitter_brightness=0.4,
        jitter_contrast=0.4,
        normalization=stats,
        mode="contrastive",
    )
    return contrastive, contrastive.for_mode("finetune"), contrastive.for_mode("eval")


def run_desk_pipeline(noise, seed=0, pretrain_epochs=10, finetune_epochs=20,
                      use_pretraining=True):
    """One pretrain -> frozen fine-tune pass on the layered toy volume."""
    vol, labels = generate_synthetic_volume(
        SyntheticVolumeConfig(
            num_layers=3, dims=DESK_DIMS, dip=0.25, noise=noise, seed=0
        )
    )
    stats = compute_normalization_stats(vol)
    slices = extract_crosslines(vol, labels)
    contrastive_policy, finetune_policy, eval_policy = desk_policies(stats)

    pretrain_log = None
    if use_pretraining:
        stage = StageConfig(
            stage="pretrain",
            epochs=pretrain_epochs,
            batch_size=DESK_BATCH,
            seed=seed,
            temperature=0.07,
            num_partitions=DESK_PARTITIONS,
        )
        pretrain_ckpt, pretrain_log = pretrain_contrastive(
            slices,
            stage,
            OptimizerConfig(learning_rate=PRETRAIN_LR, momentum=0.9),
            DESK_ENCODER,
            DESK_PROJECTION,
            contrastive_policy,
            assignment=assign_volume_labels(len(slices), DESK_PARTITIONS),
        )
    else:
        pretrain_ckpt = initialize_checkpoint(DESK_ENCODER, DESK_PROJECTION, seed=seed)

    finetune_ckpt, finetune_log = finetune_segmentation(
        slices,
        pretrain_ckpt,
        StageConfig(
            stage="finetune", epochs=finetune_epochs, batch_size=DESK_BATCH, seed=seed + 1
        ),
        OptimizerConfig(learning_rate=FINETUNE_LR, momentum=0.9),
        DESK_HEAD,
        finetune_policy,
    )
    return {
        "slices": slices,
        "stats": stats,
        "eval_policy": eval_policy,
        "pretrain_ckpt": pretrain_ckpt,
        "pretrain_log": pretrain_log,
        "finetune_ckpt": finetune_ckpt,
        "finetune_log": finetune_log,
    }


def train_set_scores(run):
    bundle = load_segmentation_bundle(run["finetune_ckpt"])
    cm = ConfusionMatrix(DESK_HEAD.num_classes)
    for s in run["slices"]:
        update_confusion(cm, predict_slice(bundle, s.image, run["eval_policy"]), s.mask)
    return mean_iou(cm), pixel_accuracy(cm)


@pytest.fixture(scope="module")
def desk_run():
    """The noisy desk-scale pipeline, shared by criteria 6 and 8."""
    start = time.monotonic()
    run = run_desk_pipeline(noise=0.05)
    run["elapsed"] = time.monotonic() - start
    return run


# ------------------------------------------------------------------ criteria


def test_acceptance_1_loss_oracle_equivalence():
    rng = np.random.default_rng(20220901)
    temperatures = (0.07, 0.5, 1.0)
    worst = 0.0
    degenerate = 0
    start = time.monotonic()
    for trial in range(1000):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 5))
        z = random_unit_rows(rng, b, d)
        labels = rng.integers(0, b, size=b)
        tau = temperatures[trial % 3]
        expected, _, used = supcon_double_loop(z, labels, tau)
        batch = EmbeddingBatch(z, labels, tau)
        if used == 0:
            degenerate += 1
            with pytest.raises(DegenerateBatchError):
                supcon_loss(batch)
            continue
        worst = max(worst, abs(supcon_loss(batch).value - expected))
    elapsed = time.monotonic() - start
    _verdict(
        "1 loss-oracle",
        worst < 1e-6 and elapsed < 10.0,
        f"max |loss - oracle| {worst:.2e} over 1000 batches "
        f"({degenerate} degenerate) in {elapsed:.1f}s (<10s)",
    )


def test_acceptance_2_gradient_check():
    rng = np.random.default_rng(20220902)
    worst = 0.0
    start = time.monotonic()
    for _ in range(100):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(2, 5))
        z = random_unit_rows(rng, b, d)
        labels = labels_with_a_positive(rng, b, max(2, b // 2))
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        batch = EmbeddingBatch(z, labels, tau)
        grad = supcon_gradient(batch)

        def value_at(arr, labels=labels, tau=tau):
            return supcon_loss(
                EmbeddingBatch(arr, labels, tau), check_norms=False
            ).value

        fd = central_difference_gradient(value_at, z.copy(), h=1e-5)
        # One relative error per batch: norm ratio, floored at 1e-8 so the
        # all-zero-gradient case (two rows, one label) stays well defined.
        rel = float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8))
        worst = max(worst, rel)
    elapsed = time.monotonic() - start
    _verdict(
        "2 gradient-check",
        worst < 1e-4 and elapsed < 30.0,
        f"max relative error {worst:.2e} over 100 batches in {elapsed:.1f}s (<30s)",
    )


def test_acceptance_3_simclr_reduction():
    rng = np.random.default_rng(20220903)
    worst_oracle = 0.0
    exact = True
    for _ in range(100):
        k = int(rng.integers(2, 7))
        z = random_unit_rows(rng, 2 * k, int(rng.integers(2, 5)))
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        instance_labels = np.repeat(np.arange(k), 2)
        via_simclr = simclr_loss(z, temperature=tau).value
        via_supcon = supcon_loss(EmbeddingBatch(z, instance_labels, tau)).value
        exact = exact and (via_simclr == via_supcon)
        worst_oracle = max(worst_oracle, abs(via_simclr - ntxent_double_loop(z, tau)))
    _verdict(
        "3 simclr-reduction",
        exact and worst_oracle < 1e-6,
        f"instance-label equality exact; max |loss - nt-xent oracle| "
        f"{worst_oracle:.2e} over 100 paired batches",
    )


def test_acceptance_4_partition_fidelity():
    assignment = assign_volume_labels(700, 100)
    labels = assignment.labels
    run_lengths = np.diff(
        np.concatenate([[0], np.nonzero(np.diff(labels))[0] + 1, [len(labels)]])
    )
    worked_example = (
        len(run_lengths) == 100
        and all(length == 7 for length in run_lengths)
        and labels[0] == 0
        and labels[-1] == 99
    )

    exhaustive = True
    for s in range(1, 65):
        for n in range(1, s + 1):
            seq = assign_volume_labels(s, n).labels
            starts = np.nonzero(np.diff(seq))[0] + 1
            lengths = np.diff(np.concatenate([[0], starts, [s]]))
            contiguous = bool(np.all(np.diff(seq) >= 0)) and len(lengths) == n
            covered = seq[0] == 0 and seq[-1] == n - 1 and len(seq) == s
            balanced = lengths.max() - lengths.min() <= 1
            exhaustive = exhaustive and contiguous and covered and balanced
    _verdict(
        "4 partition-fidelity",
        worked_example and exhaustive,
        "700/100 -> 100 contiguous runs of 7; all (S<=64, N<=S) contiguous, "
        "covering, size spread <=1",
    )


def test_acceptance_5_miou_oracle():
    rng = np.random.default_rng(20220905)
    all_exact = True
    for _ in range(200):
        c = int(rng.integers(2, 6))
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        predictions = rng.integers(0, c, size=(h, w))
        targets = rng.integers(0, c, size=(h, w))
        cm = update_confusion(ConfusionMatrix(c), predictions, targets)
        all_exact = all_exact and np.array_equal(
            cm.counts, confusion_double_loop(predictions, targets, c)
        )

    perfect = update_confusion(
        ConfusionMatrix(4),
        np.arange(16).reshape(4, 4) % 4,
        np.arange(16).reshape(4, 4) % 4,
    )
    perfect_ok = mean_iou(perfect) == 1.0

    hand = ConfusionMatrix(2, counts=np.array([[2, 1], [1, 2]]))
    hand_ok = class_iou(hand, 0) == 0.5

    _verdict(
        "5 miou-oracle",
        all_exact and perfect_ok and hand_ok,
        "200 random pairs exact; perfect prediction MIOU 1.0; "
        "[[2,1],[1,2]] class-0 IoU 0.5",
    )


def test_acceptance_6_desk_scale_end_to_end(desk_run):
    losses = desk_run["pretrain_log"].loss_sequence()
    miou, _ = train_set_scores(desk_run)

    noiseless = run_desk_pipeline(noise=0.0)
    _, noiseless_accuracy = train_set_scores(noiseless)

    ok = (
        desk_run["elapsed"] < 300.0
        and losses[9] < losses[0]
        and miou > 0.6
        and noiseless_accuracy > 0.9
    )
    _verdict(
        "6 desk-scale-end-to-end",
        ok,
        f"pipeline {desk_run['elapsed']:.1f}s (<300s); pretrain loss "
        f"{losses[0]:.4f} -> {losses[9]:.4f}; train MIOU {miou:.4f} (>0.6); "
        f"noiseless pixel accuracy {noiseless_accuracy:.4f} (>0.9)",
    )


def test_acceptance_7_method_ordering_trend():
    # Noise high enough that per-pixel amplitude alone is ambiguous, so
    # representation quality (not the head) decides the score; shorter
    # fine-tuning keeps the head from compensating for a random encoder.
    noise = 0.5
    test_volumes = {
        0: generate_synthetic_volume(
            SyntheticVolumeConfig(num_layers=3, dims=(32, 12, 64), dip=0.25,
                                  noise=noise, seed=101)
        ),
        1: generate_synthetic_volume(
            SyntheticVolumeConfig(num_layers=3, dims=(32, 12, 64), dip=0.25,
                                  noise=noise, seed=202)
        ),
    }
    splits = build_test_splits(12, 12, 3)

    def test_miou(seed, use_pretraining):
        run = run_desk_pipeline(
            noise=noise, seed=seed, finetune_epochs=10, use_pretraining=use_pretraining
        )
        bundle = load_segmentation_bundle(run["finetune_ckpt"])
        _, average = evaluate_splits(bundle, splits, test_volumes, run["eval_policy"])
        return average

    seeds = range(5)
    pretrained = [test_miou(seed, True) for seed in seeds]
    random_init = [test_miou(seed, False) for seed in seeds]
    mean_pre, mean_rand = float(np.mean(pretrained)), float(np.mean(random_init))
    _verdict(
        "7 method-ordering-trend",
        mean_pre >= mean_rand,
        f"5-seed mean test MIOU: volume-label pretraining {mean_pre:.4f} vs "
        f"random init {mean_rand:.4f}",
    )


def test_acceptance_8_frozen_encoder_bit_identity(desk_run):
    pre = desk_run["pretrain_ckpt"].params
    fin = desk_run["finetune_ckpt"].params
    encoder_keys = sorted(k for k in pre if k.startswith("encoder."))
    identical = bool(encoder_keys) and all(
        fin[k].dtype == pre[k].dtype
        and fin[k].shape == pre[k].shape
        and fin[k].tobytes() == pre[k].tobytes()
        for k in encoder_keys
    )
    _verdict(
        "8 frozen-encoder",
        identical,
        f"{len(encoder_keys)} encoder arrays bit-identical after fine-tuning",
    )


def test_acceptance_9_determinism(tmp_path):
    data_dir = tmp_path / "data"
    assert cli_main(["synth", "--dims", "32,64,64", "--layers", "3", "--dip", "0.25",
                     "--noise", "0.05", "--seed", "0", "--out", str(data_dir)]) == 0

    def run_pipeline(tag):
        runs = tmp_path / tag
        config = tmp_path / f"{tag}.json"
        config.write_text(json.dumps({
            "data": {
                "train_volume": str(data_dir / "amplitude.npy"),
                "train_labels": str(data_dir / "labels.npy"),
                "test_volumes": [str(data_dir / "amplitude.npy")],
                "test_labels": [str(data_dir / "labels.npy")],
                "num_test_splits": 4,
            },
            "labels": {"num_partitions": 8},
            "augmentation": {"crop_size": 32, "crop_scale": [0.5, 1.0]},
            "model": {"encoder_family": "tiny", "output_stride": 8,
                      "projection_hidden_dim": 64, "projection_out_dim": 32,
                      "head_variant": "tiny", "num_classes": 3},
            "pretrain": {"epochs": 3, "batch_size": 16, "seed": 0},
            "finetune": {"epochs": 3, "batch_size": 16, "seed": 1},
            "optimizer": {"learning_rate": 0.05},
            "output": {"dir": str(runs)},
        }))

        def newest(before):
            (new,) = set(runs.iterdir()) - before
            return new

        assert cli_main(["pretrain", "--config", str(config)]) == 0
        pretrain_dir = newest(set())
        assert cli_main(["finetune", "--config",
                         str(pretrain_dir / "resolved_config.json")]) == 0
        finetune_dir = newest({pretrain_dir})
        assert cli_main(["evaluate", "--config",
                         str(finetune_dir / "resolved_config.json")]) == 0
        evaluate_dir = newest({pretrain_dir, finetune_dir})

        summaries = {
            stage: (d / "summary.json").read_bytes()
            for stage, d in (("pretrain", pretrain_dir),
                             ("finetune", finetune_dir),
                             ("evaluate", evaluate_dir))
        }
        losses = {
            "pretrain": json.loads(summaries["pretrain"])["loss_sequence"],
            "finetune": json.loads(summaries["finetune"])["loss_sequence"],
        }
        return summaries, losses

    summaries_a, losses_a = run_pipeline("first")
    summaries_b, losses_b = run_pipeline("second")

    loss_gap = max(
        abs(a - b)
        for stage in losses_a
        for a, b in zip(losses_a[stage], losses_b[stage], strict=True)
    )
    same_summaries = summaries_a == summaries_b
    _verdict(
        "9 determinism",
        loss_gap <= 1e-6 and same_summaries,
        f"max loss-sequence gap {loss_gap:.2e} (<=1e-6); "
        f"summary JSON byte-identical for all three stages",
    )
