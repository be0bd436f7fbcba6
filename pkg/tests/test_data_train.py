import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import mtrans.train as T
from mtrans import kspace
from mtrans.data import (SyntheticPhantomSpec, build_dataset, degrade, gradient_correlation,
                         load_volume_pair, make_synthetic_pair)
from mtrans.io import FormatError, save_mtt
from mtrans.metrics import nmse, psnr

from conftest import TOY

FAST = T.TrainConfig(model=T.MTransConfig(H=16, W=16, C=2, P=8, n_enc=1, heads=2), steps=3,
                     dataset_size=4, eval_size=2, batch_size=2, lr=1e-2)


# -- phantoms ------------------------------------------------------------------------

@given(st.integers(0, 2 ** 31), st.integers(0, 10_000))
def test_phantom_pair_range_and_determinism(seed, index):
    spec = SyntheticPhantomSpec(32, 32, (3, 8), seed)
    a, b = make_synthetic_pair(spec, index)
    a2, b2 = make_synthetic_pair(spec, index)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    assert a.min() >= 0 and a.max() == pytest.approx(1.0)
    assert b.min() >= 0 and b.max() <= 1.0


def test_phantom_zero_ellipses():
    a, b = make_synthetic_pair(SyntheticPhantomSpec(16, 16, (0, 0), 1), 0)
    assert not a.any() and not b.any()


def test_phantom_modalities_share_edges():
    spec = SyntheticPhantomSpec(64, 64, (3, 8), 0)
    corr = [gradient_correlation(*make_synthetic_pair(spec, i)) for i in range(20)]
    assert np.mean(corr) > 0.6


def test_phantom_background_dark():
    a, b = make_synthetic_pair(SyntheticPhantomSpec(32, 32, (3, 8), 0), 0)
    for img in (a, b):
        assert img[0, 0] == 0 and img[-1, -1] == 0


# -- degradation and datasets ----------------------------------------------------------

def test_degrade_full_mask_identity(rng):
    b = rng.random((32, 32))
    np.testing.assert_allclose(degrade(b, "reconstruction", mask=np.ones(32, dtype=bool)), b, atol=1e-10)


def test_degrade_sr_shape(rng):
    assert degrade(rng.random((32, 32)), "super_resolution", scale=2).shape == (16, 16)


def test_degrade_errors(rng):
    with pytest.raises(ValueError):
        degrade(rng.random((8, 8)), "reconstruction")
    with pytest.raises(ValueError):
        degrade(rng.random((8, 8)), "denoise")


def test_zero_filled_input_is_degraded():
    spec = SyntheticPhantomSpec(32, 32, (3, 8), 0)
    s = build_dataset(1, "reconstruction", spec, accel=4)[0]
    assert 0 < nmse(s.target_input, s.target_gt) < 1


def test_build_dataset_deterministic():
    spec = SyntheticPhantomSpec(32, 32, (3, 8), 4)
    a = build_dataset(8, "reconstruction", spec)
    b = build_dataset(8, "reconstruction", spec)
    assert len(a) == 8
    for x, y in zip(a, b):
        assert np.array_equal(x.target_input, y.target_input)
        assert np.array_equal(x.aux_image, y.aux_image)


def test_build_dataset_full_mask_identity():
    spec = SyntheticPhantomSpec(32, 32, (3, 8), 0)
    for s in build_dataset(4, "reconstruction", spec, mask_kind="full"):
        np.testing.assert_allclose(s.target_input, s.target_gt, atol=1e-10)


def test_build_dataset_modes():
    spec = SyntheticPhantomSpec(32, 32, (3, 8), 0)
    paired = build_dataset(2, "super_resolution", spec, scale=2)
    noise = build_dataset(2, "super_resolution", spec, scale=2, aux_mode="noise")
    self_ = build_dataset(2, "super_resolution", spec, scale=2, aux_mode="self")
    assert paired[0].target_input.shape == (16, 16)
    assert np.array_equal(paired[0].target_gt, noise[0].target_gt)
    assert np.array_equal(paired[0].target_input, noise[0].target_input)
    assert not np.array_equal(paired[0].aux_image, noise[0].aux_image)
    np.testing.assert_array_equal(self_[0].aux_image, kspace.upsample_nearest(self_[0].target_input, 2))


def test_build_dataset_errors():
    spec = SyntheticPhantomSpec(32, 32, (3, 8), 0)
    with pytest.raises(ValueError):
        build_dataset(0, "reconstruction", spec)
    with pytest.raises(ValueError):
        build_dataset(1, "reconstruction", spec, aux_mode="other")
    with pytest.raises(ValueError):
        build_dataset(1, "reconstruction", spec, mask_kind="radial")


def test_load_volume_pair(tmp_path, rng):
    t, a = rng.random((3, 8, 8)) * 5, rng.random((3, 8, 8)) + 1j * rng.random((3, 8, 8))
    save_mtt(tmp_path / "t.mtt", t)
    save_mtt(tmp_path / "a.mtt", a)
    pairs = load_volume_pair(tmp_path / "t.mtt", tmp_path / "a.mtt")
    assert len(pairs) == 3
    aux, tar = pairs[1]
    np.testing.assert_allclose(tar, t[1] / t[1].max())
    np.testing.assert_allclose(aux, np.abs(a[1]) / np.abs(a[1]).max())
    save_mtt(tmp_path / "bad.mtt", rng.random((2, 8, 8)))
    with pytest.raises(ValueError):
        load_volume_pair(tmp_path / "t.mtt", tmp_path / "bad.mtt")


# -- config -----------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = T.TrainConfig(model=TOY, seed=7, aux_mode="noise")
    (tmp_path / "c.cfg").write_text(T.dump_config(cfg))
    assert T.load_config(tmp_path / "c.cfg") == cfg


def test_config_unknown_key_rejected():
    with pytest.raises(FormatError, match="unknown"):
        T.TrainConfig.from_flat({"lrate": "0.1"})


def test_config_bad_value():
    with pytest.raises(FormatError):
        T.TrainConfig.from_flat({"steps": "many"})
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=9, dataset_size=8)


def test_seed_fan_out_distinct():
    s = T.TrainConfig(seed=3).seeds
    assert len({s["init"], s["order"], s["data"]}) == 3
    assert T.TrainConfig(seed=3).seeds == s


# -- optimisation -------------------------------------------------------------------------

def test_sgd_step_examples():
    p = {"w": np.array([1.0])}
    assert T.sgd_step(p, {"w": np.array([2.0])}, 0.1)["w"][0] == pytest.approx(0.8)
    assert np.array_equal(T.sgd_step(p, {"w": np.array([0.0])}, 0.1)["w"], p["w"])
    with pytest.raises(ValueError):
        T.sgd_step(p, {"w": np.zeros(2)}, 0.1)


def test_batch_order_covers_epochs():
    order = T.batch_order(8, 4, 6, seed=1)
    assert len(order) == 6 and all(len(b) == 4 for b in order)
    first_epoch = sorted(order[0] + order[1])
    assert first_epoch == list(range(8))
    assert order == T.batch_order(8, 4, 6, seed=1)


def test_train_zero_steps():
    report, params = T.train(FAST.replace(steps=0))
    assert report.losses == []
    assert report.initial_train_loss == report.final_train_loss
    init = T.init_params(FAST.model, FAST.seeds["init"])
    assert all(np.array_equal(params[k], init[k]) for k in init)
    assert math.isfinite(report.metrics["psnr"]["mean"])


def test_train_deterministic(tmp_path):
    r1, _ = T.train(FAST, tmp_path / "a")
    r2, _ = T.train(FAST, tmp_path / "b")
    assert r1.losses == r2.losses
    for name in ("report.json", "train.log", "model.ckpt", "model.mtt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "report.json").read_text())
    assert summary["steps"] == 3 and len(summary["metrics"]["psnr"]["values"]) == 2


def test_train_nan_aborts(monkeypatch):
    real = T.init_params

    def poisoned(cfg, seed, dtype=np.float64):
        p = real(cfg, seed, dtype)
        p["tail_tar.conv2.b"][:] = np.nan
        return p

    monkeypatch.setattr(T, "init_params", poisoned)
    with pytest.raises(T.TrainingDiverged, match="step 1.*tail_tar"):
        T.train(FAST)


def test_checkpoint_round_trip(tmp_path):
    _, params = T.train(FAST.replace(steps=1), tmp_path)
    loaded, cfg = T.load_checkpoint(tmp_path / "model.ckpt")
    assert cfg == FAST.replace(steps=1)
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    other = T.MTransConfig(H=16, W=16, C=3, P=8, n_enc=1, heads=2)
    with pytest.raises(ValueError):
        T.load_checkpoint(tmp_path / "model.ckpt", expect=other)


def test_evaluate_matches_per_sample(tmp_path):
    _, params = T.train(FAST.replace(steps=1))
    _, eval_set = T.datasets(FAST)
    s = T.evaluate(params, eval_set, FAST.model)
    s2 = T.evaluate(params, eval_set, FAST.model, jobs=2)
    for i, sample in enumerate(eval_set):
        x = T.predict(params, sample, FAST.model).x_tar.data
        assert s.psnr[i] == psnr(x, sample.target_gt, sample.target_gt.max())
        assert s.nmse[i] == nmse(x, sample.target_gt)
    assert s.as_dict() == s2.as_dict()


def test_evaluate_shape_mismatch():
    _, eval_set = T.datasets(FAST)
    with pytest.raises(ValueError):
        T.evaluate({}, eval_set, FAST.model)


# -- ablation ---------------------------------------------------------------------------------

def test_parse_matrix():
    cells = T.parse_matrix("H = 16\nW = 16\nC = 2\nP = 8\nn_enc = 1\nheads = 2\n"
                           "[a]\nalpha = 0.5\n[b]\nalpha = 1.0\n")
    assert list(cells) == ["a", "b"]
    assert cells["b"].model.alpha == 1.0 and cells["a"].model.H == 16
    with pytest.raises(FormatError):
        T.parse_matrix("steps = 3\n")
    with pytest.raises(FormatError):
        T.parse_matrix("[a]\n[a]\n")
    with pytest.raises(FormatError):
        T.parse_matrix("[a]\nbogus = 1\n")


def test_ablation_identical_cells_degenerate(tmp_path):
    res = T.run_ablation({"a": FAST, "b": FAST}, tmp_path)
    c = res.comparisons["b"]["psnr"]
    assert c["mean_diff"] == 0.0 and c["p"] == 1.0 and c["degenerate"]
    assert (tmp_path / "ablation.json").exists() and (tmp_path / "ablation.txt").exists()


def test_ablation_alpha_sweep_four_reports():
    cells = {f"alpha_{a}": FAST.replace(alpha=a, steps=1) for a in (0.5, 0.7, 0.9, 1.0)}
    res = T.run_ablation(cells)
    assert len(res.reports) == 4 and len(res.comparisons) == 3


def test_ablation_requires_shared_data():
    with pytest.raises(ValueError, match="seed"):
        T.run_ablation({"a": FAST, "b": FAST.replace(seed=1)})
