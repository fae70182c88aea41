"""Epoch loop, learning-rate schedule and evaluation records."""

import numpy as np
import pytest

from coseg.config import ModelConfig
from coseg.data import SyntheticConfig, gen_synthetic_pairset
from coseg.network import CosegModel
from coseg.training import TrainConfig, evaluate, fit

SMALL = dict(stage_channels=(4, 8), convs_per_stage=1, input_size=64)


@pytest.fixture(scope="module")
def pairs():
    return gen_synthetic_pairset(SyntheticConfig(train_pairs=4, val_pairs=0, test_pairs=2, unseen_pairs=1))


class TestSchedule:
    def test_constant(self):
        cfg = TrainConfig(epochs=5, lr=0.01)
        assert [cfg.lr_at(e) for e in range(5)] == [0.01] * 5

    def test_cosine_endpoints_and_monotone(self):
        cfg = TrainConfig(epochs=10, lr=0.01, schedule="cosine")
        lrs = [cfg.lr_at(e) for e in range(10)]
        assert lrs[0] == 0.01
        assert all(a > b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] > 0
        assert cfg.lr_at(5) == pytest.approx(0.005)

    def test_unknown(self):
        with pytest.raises(ValueError):
            TrainConfig(schedule="step")


class TestFit:
    def test_history_and_callback(self, pairs):
        m = CosegModel(ModelConfig(**SMALL), seed=0)
        seen = []
        hist = fit(m, pairs["train"], TrainConfig(epochs=2, batch_pairs=2), on_epoch=lambda e, l: seen.append(e))
        assert seen == [0, 1] and len(hist.epoch_loss) == 2 and hist.seconds > 0

    def test_seeded_runs_match(self, pairs):
        out = []
        for _ in range(2):
            m = CosegModel(ModelConfig(**SMALL), seed=0, dtype=np.float64)
            out.append(fit(m, pairs["train"], TrainConfig(epochs=1, batch_pairs=2, seed=3)).epoch_loss)
        assert out[0] == out[1]

    def test_evaluate_records_every_image(self, pairs):
        m = CosegModel(ModelConfig(**SMALL), seed=0)
        recs = evaluate(m, pairs["test"])
        assert len(recs) == 2 * len(pairs["test"])
        assert {r[0] for r in recs} == {p.label for p in pairs["test"]}
        assert all(0 <= r[1] <= 1 and 0 <= r[2] <= 1 for r in recs)


class TestPretrainOnShapes:
    def test_only_encoder_moves(self):
        from coseg.training import PretrainConfig, pretrain_on_shapes

        m = CosegModel(ModelConfig.desk(stage_channels=(4, 8), convs_per_stage=1), seed=0)
        before = {k: p.data.copy() for k, p in m.params.items()}
        acc = pretrain_on_shapes(m, per_class=2, cfg=PretrainConfig(epochs=2, batch=5))
        assert len(acc) == 2 and all(0 <= a <= 1 for a in acc)
        for k, p in m.params.items():
            assert np.array_equal(p.data, before[k]) != k.startswith("enc.")


def test_desk_config():
    cfg = ModelConfig.desk(variant="csa")
    assert (cfg.pooling, cfg.dropout, cfg.variant) == ("max", 0.0, "csa")
    assert ModelConfig().dropout == 0.5 and ModelConfig().pooling == "avg"
