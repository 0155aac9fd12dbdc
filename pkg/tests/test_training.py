import dataclasses
import math

import numpy as np
import pytest

from helpers import MICRO, micro_problem
from nfsm import backbone, training, workflow
from nfsm.errors import FormatError, NumericError, ShapeError
from nfsm.tensor import Tensor
from nfsm.training import Adam, Checkpoint, TrainConfig


class TestLosses:
    def test_perfect_prediction(self):
        lc = training.loss_current(Tensor([0.0, 1.0, 0.0]), [0, 1, 0]).item()
        assert 0 <= lc <= 1e-12

    def test_uniform_is_log_s(self):
        for y in np.eye(4):
            assert training.loss_current(Tensor([0.25] * 4), y).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_hand_case(self):
        assert training.loss_current(Tensor([0.8, 0.2]), [0, 1]).item() == pytest.approx(-math.log(0.2), abs=1e-15)

    def test_invalid_one_hot(self):
        with pytest.raises(ValueError):
            training.loss_current(Tensor([0.5, 0.5]), [0.5, 0.5])
        with pytest.raises(ValueError):
            training.loss_current(Tensor([0.5, 0.5]), [1, 1])

    def test_trans_hand_case(self):
        lt = training.loss_trans(Tensor([[0.5, 0.5], [0.25, 0.75]]), [[1, 0], [0, 1]]).item()
        assert lt == pytest.approx((math.log(2) + math.log(4 / 3)) / 2, abs=1e-15)

    def test_trans_uniform_and_perfect(self):
        assert training.loss_trans(Tensor(np.full((5, 3), 1 / 3)), np.eye(3)[[0, 1, 2, 0, 1]]).item() == pytest.approx(
            math.log(3), abs=1e-15)
        assert training.loss_trans(Tensor(np.eye(3)), np.eye(3)).item() <= 1e-12

    def test_trans_length_mismatch(self):
        with pytest.raises(ShapeError):
            training.loss_trans(Tensor(np.full((3, 2), 0.5)), np.eye(2))

    def test_total_loss(self):
        assert training.total_loss(1.0, 2.0, 0.5) == 2.0
        assert training.total_loss(1.5, 7.0, 0.0) == 1.5

    def test_total_gradient_decomposes(self):
        params, windows, _ = micro_problem(1)

        def grads(fn):
            for p in params.values():
                p.zero_grad()
            fn().backward()
            return {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in params.items()}

        alpha = 0.7
        total = grads(lambda: training.compute_losses(params, MICRO, windows, alpha, 2)[0])
        g_c = grads(lambda: training.compute_losses(params, MICRO, windows, alpha, 2)[1])
        g_t = grads(lambda: training.compute_losses(params, MICRO, windows, alpha, 2)[2])
        for k in total:
            assert np.abs(total[k] - (g_c[k] + alpha * g_t[k])).max() <= 1e-10, k


class TestTrainStep:
    def test_zero_learning_rate_leaves_params(self, micro):
        params, windows, _ = micro
        before = {k: v.data.tobytes() for k, v in params.items()}
        tcfg = TrainConfig(lr_stage2=0.0)
        opt = Adam(params, 0.0)
        for _ in range(3):
            training.train_step(params, windows, MICRO, tcfg, opt)
        assert {k: v.data.tobytes() for k, v in params.items()} == before

    def test_frozen_regime(self, micro):
        params, windows, _ = micro
        tcfg = TrainConfig(freeze_backbone=True)
        frozen = {k: v.data.tobytes() for k, v in params.items() if k.startswith(backbone.BASELINE_PREFIXES)}
        trainable = {k: v.data.copy() for k, v in params.items() if k.startswith(backbone.NFSM_PREFIXES)}
        opt = Adam(params, 1e-2)
        for _ in range(10):
            training.train_step(params, windows, MICRO, tcfg, opt)
        assert {k: params[k].data.tobytes() for k in frozen} == frozen
        assert all(not np.array_equal(params[k].data, v) for k, v in trainable.items() if "ln" not in k)

    def test_trainable_names(self, micro):
        params = micro[0]
        assert set(training.trainable_names(params, 2, False)) == set(params)
        s1 = training.trainable_names(params, 1, False)
        assert s1 and all(k.startswith(backbone.BASELINE_PREFIXES) for k in s1)
        frozen = training.trainable_names(params, 2, True)
        assert "nfsm.e_g" in frozen and not any(k.startswith("input.") for k in frozen)

    def test_overfit_trend(self):
        params, windows, _ = micro_problem(2, batch=4)
        tcfg = TrainConfig()
        opt = Adam(params, 1e-2)
        losses = [training.train_step(params, windows, MICRO, tcfg, opt).total for _ in range(50)]
        best = [min(losses[i:i + 10]) for i in range(0, 50, 10)]
        assert all(b < a for a, b in zip(best, best[1:]))
        assert losses[-1] < 0.5 * losses[0]

    def test_non_finite_loss(self, micro):
        params, windows, _ = micro
        params["classifier.w"].data[0, 0] = np.nan
        with pytest.raises(NumericError):
            training.train_step(params, windows, MICRO, TrainConfig(), Adam(params, 1e-3))

    def test_config_invariants(self):
        for bad in ({"alpha": -1}, {"lr_stage1": -1e-3}, {"batch_size": 0}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestWindows:
    def test_indices_clamped(self):
        idx = training.window_indices(4, 3, 2)
        assert idx[0].tolist() == [0, 0, 0, 1, 2]
        assert idx[3].tolist() == [1, 2, 3, 3, 3]

    def test_build_windows(self):
        video = workflow.VideoSequence("v", np.arange(10.0).reshape(5, 2), [0, 0, 1, 1, 2])
        batch = training.build_windows([video], 2, 1)
        assert batch.features.shape == (5, 2, 2)
        np.testing.assert_array_equal(batch.features[0], [[0, 1], [0, 1]])
        assert batch.context[4].tolist() == [1, 2, 2]
        samples = training.window_samples(video, 2, 1)
        np.testing.assert_array_equal(training.WindowBatch.from_samples(samples).features, batch.features)
        with pytest.raises(ValueError):
            training.build_windows([], 2, 1)


def tiny_videos():
    spec = workflow.synth7(feat_dim=4)
    return [workflow.sample_video(spec, s, max_frames=30) for s in range(3)]


TINY = backbone.ModelConfig(n=3, m=2, d=4, s=7, feat_dim=4)
TINY_TRAIN = TrainConfig(epochs_stage1=1, epochs_stage2=1, batch_size=16)


class TestProtocol:
    def test_two_stage(self):
        logs = []
        ckpt = training.train(tiny_videos(), TINY, TINY_TRAIN, logs.append)
        assert ckpt.stage == 2 and ckpt.has_nfsm
        assert {entry["stage"] for entry in logs} == {1, 2}
        assert all(entry["L_trans"] is None for entry in logs if entry["stage"] == 1)
        assert all(entry["L_trans"] is not None for entry in logs if entry["stage"] == 2)
        assert [e["step"] for e in logs] == list(range(1, len(logs) + 1))

    def test_stage2_zero_gives_baseline(self):
        ckpt = training.train(tiny_videos(), TINY, dataclasses.replace(TINY_TRAIN, epochs_stage2=0))
        assert ckpt.stage == 1 and not ckpt.has_nfsm

    def test_deterministic_bytes(self):
        a = training.train(tiny_videos(), TINY, TINY_TRAIN)
        b = training.train(tiny_videos(), TINY, TINY_TRAIN)
        assert a.to_bytes() == b.to_bytes()
        c = training.train(tiny_videos(), TINY, dataclasses.replace(TINY_TRAIN, seed=1))
        assert c.to_bytes() != a.to_bytes()

    def test_stage2_starts_from_baseline(self):
        base = training.train_stage1(tiny_videos(), TINY, TINY_TRAIN)
        ckpt = training.train_stage2(base, tiny_videos(), dataclasses.replace(TINY_TRAIN, lr_stage2=0.0))
        for k, v in base.params.items():
            assert ckpt.params[k].data.tobytes() == v.data.tobytes()

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            training.train([], TINY, TINY_TRAIN)


class TestCheckpoint:
    def _ckpt(self):
        return Checkpoint(MICRO, backbone.init_params(MICRO, seed=4), step=7, stage=2, meta={"note": "x"})

    def test_round_trip(self, tmp_path):
        ckpt = self._ckpt()
        digest = training.save_checkpoint(ckpt, tmp_path / "a.ckpt")
        back = training.load_checkpoint(tmp_path / "a.ckpt")
        assert back.model_config == MICRO and back.step == 7 and back.stage == 2
        for k, v in ckpt.params.items():
            assert back.params[k].data.tobytes() == v.data.tobytes()
        assert training.save_checkpoint(back, tmp_path / "b.ckpt") == digest
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_layout(self, tmp_path):
        training.save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        assert blob[:8] == b"NFSMCK1\0"
        assert int.from_bytes(blob[8:12], "little") == 1

    @pytest.mark.parametrize("cut", [4, 14, 200, -1])
    def test_truncated(self, tmp_path, cut):
        training.save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            training.load_checkpoint(tmp_path / "a.ckpt")

    def test_bad_magic_and_version(self, tmp_path):
        training.save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        blob = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
        with pytest.raises(FormatError, match="magic"):
            training.load_checkpoint(tmp_path / "a.ckpt")
        (tmp_path / "a.ckpt").write_bytes(blob[:8] + (9).to_bytes(4, "little") + blob[12:])
        with pytest.raises(FormatError, match="version"):
            training.load_checkpoint(tmp_path / "a.ckpt")

    def test_mismatched_config(self, tmp_path):
        training.save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        with pytest.raises(ShapeError, match="expected .* found"):
            training.load_checkpoint(tmp_path / "a.ckpt", expected=dataclasses.replace(MICRO, d=6))
