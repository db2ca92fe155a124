"""Nodule classifier: shape ledger, patient-disjoint splitting, malignant
rebalancing, and a separability smoke test on synthetic cubes."""

import numpy as np
import pytest
import torch

from lungpipe.classifier import (
    ClassifierConfig,
    ClassifierTrainConfig,
    NoduleLabelSet,
    build_classifier,
    classify_nodules,
    rebalance_malignant,
    split_by_patient,
    train_classifier,
)


class TestArchitecture:
    def test_output_shape_and_distribution(self):
        net = build_classifier(ClassifierConfig(), seed=0)
        with torch.no_grad():
            y = net(torch.randn(3, 1, 32, 32, 32))
        assert y.shape == (3, 2)
        np.testing.assert_allclose(y.sum(dim=1).numpy(), 1.0, atol=1e-6)

    def test_light_stride_ledger(self):
        # strides: stem 2, pool 2, stages (1, 2, 1, 1) -> 32 -> 16 -> 8 -> 8 -> 4 -> 4 -> 4
        net = build_classifier(ClassifierConfig(stage_strides=(1, 2, 1, 1)))
        assert net.stage_output_sides() == [16, 8, 8, 4, 4, 4]

    def test_original_stride_ledger(self):
        # full stride variant for comparison runs: 32 -> 16 -> 8 -> 4 -> 2 -> 1 -> 1
        net = build_classifier(ClassifierConfig(stage_strides=(2, 2, 2, 2)))
        assert net.stage_output_sides() == [16, 8, 4, 2, 1, 1]
        net.eval()  # batch statistics are undefined on a 1^3 feature map
        with torch.no_grad():
            y = net(torch.randn(1, 1, 32, 32, 32))
        assert y.shape == (1, 2)

    def test_block_count_is_resnet18(self):
        net = build_classifier(ClassifierConfig())
        assert len(net.blocks) == 8  # 2+2+2+2 basic blocks

    def test_rejects_wrong_input_side(self):
        net = build_classifier(ClassifierConfig())
        with pytest.raises(ValueError):
            net(torch.zeros(1, 1, 16, 16, 16))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ClassifierConfig(input_side=30)
        with pytest.raises(ValueError):
            ClassifierConfig(block_repeats=(2, 2))


class TestSplit:
    def test_patient_disjoint(self):
        pids = ["a", "a", "b", "b", "c", "d", "e", "f", "g", "h"]
        rng = np.random.default_rng(0)
        tr, va = split_by_patient(pids, 0.25, rng)
        tr_p = {pids[i] for i in tr}
        va_p = {pids[i] for i in va}
        assert tr_p.isdisjoint(va_p)
        assert sorted(tr + va) == list(range(len(pids)))

    def test_single_patient_no_val(self):
        tr, va = split_by_patient(["a", "a", "a"], 0.5, np.random.default_rng(0))
        assert va == [] and tr == [0, 1, 2]

    def test_deterministic(self):
        pids = [f"p{i}" for i in range(20)]
        a = split_by_patient(pids, 0.2, np.random.default_rng(5))
        b = split_by_patient(pids, 0.2, np.random.default_rng(5))
        assert a == b


class TestRebalance:
    def test_reaches_target_ratio(self):
        rng = np.random.default_rng(1)
        vols = [rng.random((32, 32, 32)).astype(np.float32) for _ in range(12)]
        labels = [1, 1] + [0] * 10
        pids = [f"p{i}" for i in range(12)]
        v2, l2, p2 = rebalance_malignant(vols, labels, pids, np.random.default_rng(2))
        n_mal = sum(1 for l in l2 if l == 1)
        n_ben = sum(1 for l in l2 if l == 0)
        assert n_ben == 10  # benign untouched
        assert n_mal >= 0.8 * n_ben

    def test_augmented_copies_keep_patient_and_content(self):
        rng = np.random.default_rng(3)
        vols = [rng.random((32, 32, 32)).astype(np.float32) for _ in range(5)]
        labels = [1, 0, 0, 0, 0]
        pids = ["m", "b1", "b2", "b3", "b4"]
        v2, l2, p2 = rebalance_malignant(vols, labels, pids, np.random.default_rng(4))
        for vol, lab, pid in zip(v2[5:], l2[5:], p2[5:]):
            assert lab == 1 and pid == "m"
            # an orientation copy preserves the voxel multiset
            np.testing.assert_allclose(np.sort(vol.ravel()), np.sort(vols[0].ravel()), atol=1e-7)

    def test_noop_when_single_class(self):
        vols = [np.zeros((32, 32, 32), dtype=np.float32)] * 3
        v2, l2, p2 = rebalance_malignant(vols, [0, 0, 0], ["a", "b", "c"], np.random.default_rng(0))
        assert len(v2) == 3


def _separable_set(n_per_class=10, seed=0):
    """Benign: small bright cube; malignant: large bright cube."""
    rng = np.random.default_rng(seed)
    volumes, labels, pids = [], [], []
    for i in range(n_per_class * 2):
        malignant = i % 2
        side = 20 if malignant else 6
        v = rng.normal(0.02, 0.01, size=(32, 32, 32)).clip(0, 1).astype(np.float32)
        lo = (32 - side) // 2
        v[lo : lo + side, lo : lo + side, lo : lo + side] += 0.5
        volumes.append(v.clip(0, 1))
        labels.append(malignant)
        pids.append(f"p{i}")
    return NoduleLabelSet(volumes=volumes, labels=labels, patient_ids=pids, strategy="test")


class TestTraining:
    def test_learns_separable_data(self):
        data = _separable_set(8)
        hyper = ClassifierTrainConfig(iterations=60, batch_size=8, seed=0, log_every=20)
        torch.set_num_threads(1)
        net, log = train_classifier(data, hyper)
        probs = classify_nodules(net, data.volumes)
        acc = np.mean([(p > 0.5) == bool(l) for p, l in zip(probs, data.labels)])
        assert acc >= 0.8
        assert log[-1][1] < log[0][1]

    def test_rejects_single_class(self):
        data = _separable_set(4)
        data = NoduleLabelSet(
            volumes=data.volumes[::2], labels=[0] * 4, patient_ids=data.patient_ids[::2]
        )
        with pytest.raises(ValueError, match="malignant"):
            train_classifier(data, ClassifierTrainConfig(iterations=1))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            train_classifier(
                NoduleLabelSet(volumes=[], labels=[], patient_ids=[]),
                ClassifierTrainConfig(iterations=1),
            )

    def test_parallel_list_validation(self):
        with pytest.raises(ValueError):
            NoduleLabelSet(volumes=[np.zeros((32,) * 3)], labels=[0, 1], patient_ids=["a"])


class TestInference:
    def test_classify_shapes_and_range(self):
        net = build_classifier(ClassifierConfig(), seed=1)
        vols = [np.random.default_rng(i).random((32, 32, 32)).astype(np.float32) for i in range(3)]
        probs = classify_nodules(net, vols)
        assert len(probs) == 3
        assert all(0.0 <= p <= 1.0 for p in probs)

    def test_empty_input(self):
        net = build_classifier(ClassifierConfig())
        assert classify_nodules(net, []) == []

    def test_wrong_shape_rejected(self):
        net = build_classifier(ClassifierConfig())
        with pytest.raises(ValueError):
            classify_nodules(net, [np.zeros((16, 16, 16))])

    def test_eval_mode_deterministic(self):
        net = build_classifier(ClassifierConfig(), seed=2)
        vol = np.random.default_rng(0).random((32, 32, 32)).astype(np.float32)
        assert classify_nodules(net, [vol]) == classify_nodules(net, [vol])
