import csv
import math

import numpy as np
import pytest

from flowup.errors import ConfigError, TrainingDivergedError
from flowup.pipeline import FlowModel
from flowup.synthesis import AugmentConfig, gen_sample
from flowup.tcu import UpsamplerConfig
from flowup.tensor import Tensor
from flowup.training import METRIC_COLUMNS, AdamW, TrainConfig, build_optimizer, continue_without_interpolation, \
    one_cycle, sequence_loss, split_dataset, train


def small_model(mode="dc-tcu", seed=0):
    return FlowModel(mode, UpsamplerConfig.reduced(), seed=seed, encoder_channels=(8, 12, 16))


def small_cfg(**kw):
    base = dict(iterations=3, batch_size=2, mode="dc-tcu", eval_every=2, aug=AugmentConfig(crop=(32, 32)),
                upsampler=UpsamplerConfig.reduced())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data32():
    return [(s.image, s.flow) for s in (gen_sample(i, 32, 32, 2) for i in range(8))]


class TestSequenceLoss:
    def test_closed_form(self):
        gt = np.zeros((2, 4, 4))
        preds = [Tensor(np.full((2, 4, 4), 1.0)), Tensor(np.full((2, 4, 4), 0.5))]
        assert float(sequence_loss(preds, gt, 0.8).data) == pytest.approx(1.3)

    def test_single(self):
        assert float(sequence_loss([Tensor(np.full((2, 2, 2), 2.0))], np.zeros((2, 2, 2))).data) == 2.0

    def test_empty(self):
        with pytest.raises(ValueError):
            sequence_loss([], np.zeros((2, 2, 2)))


class TestSchedule:
    def test_one_cycle_shape(self):
        lrs = [one_cycle(s, 100) for s in range(100)]
        assert lrs[0] == pytest.approx(0.2) and lrs[4] == 1.0
        assert all(b <= a for a, b in zip(lrs[4:], lrs[5:]))
        assert lrs[-1] > 0 and one_cycle(100, 100) == 0.0


class TestAdamW:
    def test_matches_reference_update(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([{"lr": 0.1, "params": [p]}], weight_decay=0.01)
        p.grad = np.array([0.5, -1.0])
        opt.step()
        # first step: m_hat = g, v_hat = g^2, so the step is lr * sign(g) up to eps
        expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -1.0]) / (np.abs([0.5, -1.0]) + 1e-8)
        np.testing.assert_allclose(p.data, expect, rtol=1e-12)

    def test_duplicate_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ConfigError):
            AdamW([{"lr": 1, "params": [p]}, {"lr": 2, "params": [p]}])


class TestOptimizerGroups:
    @pytest.mark.parametrize("mode", ["shared", "dc", "dc-tcu"])
    def test_partition(self, mode):
        model = small_model(mode)
        opt = build_optimizer(model, small_cfg(mode=mode))
        base, fresh = opt.groups
        assert (base["lr"], fresh["lr"]) == (1e-4, 2e-4)
        ids = [id(p) for g in opt.groups for p in g["params"]]
        assert sorted(ids) == sorted(id(p) for p in model.parameters())
        assert {id(p) for p in fresh["params"]} == {id(p) for p in model.fresh_parameters()}


class TestTrain:
    def test_zero_lr_leaves_parameters(self, data32):
        model = small_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train(small_cfg(base_lr=0.0, fresh_lr=0.0), data32, model=model)
        for n, p in model.named_parameters():
            assert p.data.tobytes() == before[n].tobytes(), n

    def test_loss_decreases_shared_baseline(self, data32):
        cfg = TrainConfig(iterations=200, batch_size=1, mode="shared", eval_every=200, aug=AugmentConfig(crop=(32, 32)))
        result = train(cfg, data32, val=data32[:2])
        losses = np.array(result.losses)
        assert losses[-20:].mean() < losses[:20].mean()
        assert losses[-1] < losses[0]

    def test_reproducible(self, data32):
        a = train(small_cfg(), data32, model=small_model())
        b = train(small_cfg(), data32, model=small_model())
        assert a.losses == b.losses
        for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_nan_aborts_with_diagnostics(self, data32):
        bad = [(img, np.full_like(flo, np.nan)) for img, flo in data32]
        with pytest.raises(TrainingDivergedError, match="step 1.*lrs=.*grad norms"):
            train(small_cfg(), bad, model=small_model())

    def test_metrics_csv(self, data32, tmp_path):
        path = tmp_path / "m.csv"
        result = train(small_cfg(iterations=4), data32, model=small_model(), metrics_path=path)
        rows = list(csv.DictReader(open(path)))
        assert tuple(rows[0].keys()) == METRIC_COLUMNS
        assert [int(r["step"]) for r in rows] == [2, 4]
        assert all(math.isfinite(float(r["epe_val"])) for r in rows)
        assert result.final_val_epe == pytest.approx(float(rows[-1]["epe_val"]))

    def test_continuation_has_no_resize(self, data32):
        cfg = small_cfg(iterations=5, aug=AugmentConfig(crop=(32, 32), spatial_prob=1.0))
        first = train(cfg, data32, model=small_model())
        assert first.resize_calls == 5 * cfg.batch_size
        cont = continue_without_interpolation(first.model, cfg, data32)
        assert cont.resize_calls == 0
        assert len(cont.losses) == 2  # 40% of 5 steps

    def test_split(self):
        tr, va = split_dataset(list(range(20)), 0.1)
        assert len(tr) == 18 and va == [18, 19]
        with pytest.raises(ConfigError):
            split_dataset([], 0.1)

    def test_config_roundtrip(self):
        cfg = small_cfg(seed=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
