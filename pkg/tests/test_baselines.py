import numpy as np
import pytest

from honeymark.baselines import (
    MIConfig,
    TriggerConfig,
    apply_trigger,
    badnets_poison,
    badnets_verify,
    choose_poison_ids,
    mi_loss_scores,
)
from honeymark.datasets import Dataset, ImageSample
from honeymark.diffnet import ArchDescriptor, Classifier, TrainConfig
from honeymark.errors import RejectedInput


def _data(n=20, k=3):
    rng = np.random.default_rng(1)
    return Dataset(tuple(ImageSample(f"s{i:02d}", rng.random((2, 6, 6)) * 0.5, i % k) for i in range(n)), k)


class _Answer:
    tag = "answer"

    def __init__(self, label, k=3):
        self.p = np.eye(k)[label]
        self.query_count = 0
        self.seen = []

    def query(self, sample):
        self.query_count += 1
        self.seen.append(sample)
        return self.p


def test_patch_changes_nine_pixels_per_channel():
    data = _data()
    cfg = TriggerConfig(3, 1.0, target_label=0, poison_ids=("s01", "s02"))
    out = badnets_poison(data, cfg)
    for sid in cfg.poison_ids:
        changed = out[sid].pixels != data[sid].pixels
        assert changed.sum(axis=(1, 2)).tolist() == [9, 9]
        assert out[sid].label == 0
    assert out["s04"].identical_to(data["s04"])


def test_empty_poison_is_identity():
    data = _data()
    assert badnets_poison(data, TriggerConfig()) is data


def test_poison_ids_skip_target_class():
    ids = choose_poison_ids(_data(30), 0.3, 0, seed=0)
    assert len(ids) == 9 and all(int(i[1:]) % 3 != 0 for i in ids)


def test_attack_success_extremes():
    probes = [s for s in _data() if s.label != 0]
    cfg = TriggerConfig(target_label=0)
    assert badnets_verify(_Answer(0), probes, cfg).score == 1.0
    never = _Answer(1)
    assert badnets_verify(never, probes, cfg).score == 0.0
    # only triggered probes are ever sent
    assert all(np.all(s.pixels[:, -3:, -3:] == 1.0) for s in never.seen)


def test_target_class_probes_rejected():
    with pytest.raises(RejectedInput):
        badnets_verify(_Answer(0), list(_data()), TriggerConfig(target_label=0))


def _zero_loss_model(label, k=3):
    arch = ArchDescriptor.mlp((2, 6, 6), k, (1,))
    params = np.zeros(arch.param_count())
    params[-k + label] = 800.0
    return Classifier(arch, params)


def test_mi_score_is_out_loss_when_suspect_is_perfect():
    data = _data()
    samples = [s for s in data if s.label == 1][:3]
    pool = data.subset([s.id for s in data if s.label != 1])
    arch = ArchDescriptor.mlp((2, 6, 6), 3, (1,))
    ref_params = np.zeros(arch.param_count())
    ref_params[-3:] = np.log([0.5, np.exp(-2.0), 0.5 - np.exp(-2.0)])
    ref = Classifier(arch, ref_params)
    scores = mi_loss_scores(samples, _zero_loss_model(1), None, pool, references=[ref])
    assert scores == pytest.approx([2.0] * 3, abs=1e-12)


def test_mi_reference_as_suspect_scores_zero():
    data = _data(30)
    samples = list(data)[:5]
    pool = data.subset([s.id for s in list(data)[5:]])
    cfg = MIConfig(ArchDescriptor.mlp((2, 6, 6), 3, (8,)), TrainConfig(epochs=3, seed=4))
    from honeymark.baselines import train_out_references

    refs = train_out_references(pool, cfg)
    assert np.all(mi_loss_scores(samples, refs[0], cfg, pool, references=refs) == 0.0)


def test_mi_rejects_overlap():
    data = _data()
    with pytest.raises(RejectedInput):
        mi_loss_scores(list(data)[:2], _Answer(0), None, data, references=[])


def test_trigger_keeps_label_unless_relabelled():
    s = _data()["s01"]
    assert apply_trigger(s, TriggerConfig()).label == s.label
    assert apply_trigger(s, TriggerConfig(target_label=2), relabel=True).label == 2
