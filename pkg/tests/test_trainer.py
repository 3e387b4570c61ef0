import math

import numpy as np
import pytest

from cvsdeblur.gradcheck import grad_check
from cvsdeblur.model import ArchConfig, STGDNet
from cvsdeblur.optim import OptimState
from cvsdeblur.sensor import compute_exposure, make_sample
from cvsdeblur.synth import moving_pattern_dataset
from cvsdeblur.tensor import Tensor
from cvsdeblur.trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    aggregate,
    evaluate,
    load_checkpoint,
    make_batch,
    psnr_loss,
    save_checkpoint,
    steps_per_epoch,
    train,
)

TINY = ArchConfig(base_channels=4, n_scales=2)


@pytest.fixture(scope="module")
def moving():
    return moving_pattern_dataset(6, size=16, seed=3, tail=2)


def static_dataset(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    e = compute_exposure(6600)
    return [make_sample([rng.random((size, size, 3)).astype(np.float32)] * 5, e)
            for _ in range(n)]


def params_bytes(model):
    return {k: p.data.tobytes() for k, p in model.params.items()}


# ---------------------------------------------------------------- loss

def test_loss_examples():
    gt = np.random.default_rng(0).random((1, 3, 8, 8))
    assert psnr_loss(Tensor(gt, dtype=np.float64), gt, 0.5, 1e-8).item() == pytest.approx(-40.0)
    pred = Tensor(gt + 0.1, dtype=np.float64)                  # MSE = 0.01
    assert psnr_loss(pred, gt, 0.5, 0.0).item() == pytest.approx(-10.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 5)))


def test_loss_monotone_in_mse():
    gt = np.zeros((1, 1, 4, 4))
    vals = [psnr_loss(Tensor(np.full((1, 1, 4, 4), d), dtype=np.float64), gt).item()
            for d in np.linspace(0.001, 0.9, 40)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_loss_gradient_f64():
    rng = np.random.default_rng(1)
    pred = Tensor(rng.random((2, 3, 5, 5)), dtype=np.float64)
    gt = rng.random((2, 3, 5, 5))
    assert grad_check(lambda p: psnr_loss(p[0], gt), [pred], max_coords=None) <= 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_psnr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_max=-1.0)
    assert TrainConfig.from_dict({"epochs": 3, "unknown": 1}).epochs == 3


# ---------------------------------------------------------------- batching

def test_batches_group_by_n():
    e5, e7 = compute_exposure(6600), compute_exposure(9240)
    z = np.zeros((8, 8, 3), np.float32)
    data = [make_sample([z] * 5, e5) for _ in range(3)] + [make_sample([z] * 7, e7)
                                                            for _ in range(2)]
    assert steps_per_epoch(data, 2) == 3
    res = train(data, TrainConfig(epochs=1, batch_size=2, lr_max=0.0, lr_min=0.0), TINY)
    assert len(res.history) == 3


def test_make_batch_crop_shapes():
    data = moving_pattern_dataset(2, size=20, seed=0, tail=0)
    b, sd, tds, gt = make_batch(data, 4, crop=8, rng=np.random.default_rng(0))
    assert b.shape == (2, 3, 8, 8) and sd.shape == (2, 2, 8, 8) and gt.shape == (2, 3, 8, 8)
    assert len(tds) == 4 and tds[0].shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        make_batch(data, 4, crop=6, rng=np.random.default_rng(0))


def test_make_batch_crop_is_aligned():
    data = moving_pattern_dataset(1, size=16, seed=0, tail=0)
    full = make_batch(data, 4)
    cb, csd, ctds, cgt = make_batch(data, 4, crop=8, rng=np.random.default_rng(5))
    # locate the crop window from the blurred frame and check every array uses it
    hits = [(yy, xx) for yy in range(9) for xx in range(9)
            if np.array_equal(full[0][0, :, yy:yy + 8, xx:xx + 8], cb[0])]
    assert hits
    yy, xx = hits[0]
    np.testing.assert_array_equal(full[1][0, :, yy:yy + 8, xx:xx + 8], csd[0])
    np.testing.assert_array_equal(full[3][0, :, yy:yy + 8, xx:xx + 8], cgt[0])
    np.testing.assert_array_equal(full[2][1][0, :, yy:yy + 8, xx:xx + 8], ctds[1][0])


# ---------------------------------------------------------------- training loop

def test_zero_lr_leaves_parameters(moving):
    model = STGDNet(TINY)
    before = params_bytes(model)
    train(moving, TrainConfig(epochs=1, batch_size=2, lr_max=0.0, lr_min=0.0), model=model)
    assert params_bytes(model) == before


def test_zero_lr_reads_identical_data_each_epoch(monkeypatch, moving):
    from cvsdeblur import trainer
    seen = []
    orig = trainer._train_step

    def spy(model, state, batch, lr, config):
        b, sd, tds, gt = batch
        seen.append(sorted(b[i].tobytes() + sd[i].tobytes() + gt[i].tobytes()
                           + b"".join(t[i].tobytes() for t in tds) for i in range(len(b))))
        return orig(model, state, batch, lr, config)

    monkeypatch.setattr(trainer, "_train_step", spy)
    train(moving, TrainConfig(epochs=2, batch_size=6, lr_max=0.0, lr_min=0.0), TINY)
    assert len(seen) == 2 and seen[0] == seen[1]


def test_identical_seeds_identical_curves(moving):
    cfg = TrainConfig(steps=6, batch_size=2, crop=8, seed=11, td_tail_augment=True)
    a = train(moving, cfg, TINY)
    b = train(moving, cfg, TINY)
    assert a.history == b.history
    assert params_bytes(a.model) == params_bytes(b.model)
    c = train(moving, TrainConfig(steps=6, batch_size=2, crop=8, seed=12,
                                  td_tail_augment=True), TINY)
    assert c.history != a.history


def test_geometric_augment_seeded_and_off_by_default(moving):
    cfg = TrainConfig(steps=6, batch_size=2, crop=8, seed=11, geometric_augment=True)
    a = train(moving, cfg, TINY)
    assert a.history == train(moving, cfg, TINY).history
    plain = train(moving, TrainConfig(steps=6, batch_size=2, crop=8, seed=11), TINY)
    assert plain.history != a.history


def test_history_records_cosine_schedule(moving):
    res = train(moving, TrainConfig(steps=5, batch_size=2), TINY)
    steps, lrs, losses = zip(*res.history)
    assert steps == (1, 2, 3, 4, 5)
    assert lrs[0] == 2e-4 and all(a > b for a, b in zip(lrs, lrs[1:]))
    assert all(math.isfinite(v) for v in losses)


def test_static_scenes_converge_to_identity():
    data = static_dataset(8)
    res = train(data, TrainConfig(steps=500, batch_size=4, seed=0, lr_max=1e-3), TINY)
    rows = []
    for s in data:
        out = res.model.restore(s)
        rows.append(float(np.mean((out - s.gt[s.gt_index]) ** 2)))
    assert max(rows) <= 1e-4
    assert np.mean([h[2] for h in res.history[-10:]]) < np.mean([h[2] for h in res.history[:10]])


def test_non_finite_loss_raises_with_diagnostics(moving):
    model = STGDNet(TINY)
    model.params["conv_out.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="step 1"):
        train(moving, TrainConfig(steps=2, batch_size=2), model=model)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train([], TrainConfig(steps=1))


def test_resume_matches_uninterrupted(tmp_path, monkeypatch, moving):
    from cvsdeblur import trainer
    cfg = TrainConfig(steps=6, batch_size=2, crop=8, seed=4, td_tail_augment=True)
    full = train(moving, cfg, TINY)

    # interrupt after three optimizer steps, checkpoint, reload and finish
    class Stop(Exception):
        pass

    orig = trainer._train_step
    done = []

    def limited(*args):
        if len(done) == 3:
            raise Stop
        done.append(1)
        return orig(*args)

    model, state = STGDNet(TINY), OptimState()
    monkeypatch.setattr(trainer, "_train_step", limited)
    with pytest.raises(Stop):
        train(moving, cfg, model=model, state=state)
    monkeypatch.setattr(trainer, "_train_step", orig)

    path = save_checkpoint(tmp_path / "mid.ckpt", model, state)
    model2, state2 = load_checkpoint(path, with_state=True)
    assert state2.t == 3
    rest = train(moving, cfg, model=model2, state=state2)
    assert rest.history == full.history[3:]
    assert params_bytes(rest.model) == params_bytes(full.model)


# ---------------------------------------------------------------- evaluation

def test_evaluate_rows(moving):
    rows = evaluate(STGDNet(TINY), moving[:2])
    assert len(rows) == 2 and set(rows[0]) == {"psnr", "ssim", "blur_psnr", "blur_ssim"}
    agg = aggregate(rows)
    assert agg["psnr"] == pytest.approx(np.mean([r["psnr"] for r in rows]))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, moving):
    res = train(moving, TrainConfig(steps=2, batch_size=2), TINY)
    path = save_checkpoint(tmp_path / "m.ckpt", res.model, res.state, extra={"note": "x"})
    loaded, state = load_checkpoint(path, expected=TINY, with_state=True)
    assert params_bytes(loaded) == params_bytes(res.model)
    assert state.t == res.state.t
    assert all(state.m[k].tobytes() == res.state.m[k].tobytes() for k in res.state.m)
    assert all(state.v[k].tobytes() == res.state.v[k].tobytes() for k in res.state.v)
    # saving the loaded model reproduces the file byte for byte
    again = save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_arch_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", STGDNet(TINY))
    with pytest.raises(CheckpointError, match="architecture mismatch"):
        load_checkpoint(path, expected=ArchConfig(base_channels=4, n_scales=3))


def test_checkpoint_truncated_and_trailing(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", STGDNet(TINY))
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_wrong_version(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", STGDNet(TINY))
    raw = bytearray(path.read_bytes())
    raw[0] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_header_layout(tmp_path):
    import struct
    model = STGDNet(TINY)
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = path.read_bytes()
    version, count = struct.unpack_from("<II", raw, 0)
    assert (version, count) == (1, len(model.params))
    (nlen,) = struct.unpack_from("<I", raw, 8)
    first = next(iter(model.params))
    assert raw[12:12 + nlen].decode() == first
    (rank,) = struct.unpack_from("<I", raw, 12 + nlen)
    dims = struct.unpack_from(f"<{rank}I", raw, 16 + nlen)
    assert dims == model.params[first].shape
    payload = np.frombuffer(raw, "<f4", count=int(np.prod(dims)), offset=16 + nlen + 4 * rank)
    np.testing.assert_array_equal(payload.reshape(dims), model.params[first].data)


def test_missing_metadata(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", STGDNet(TINY))
    path.with_suffix(".ckpt.json").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_restore_builds_no_graph():
    model = STGDNet(TINY)
    model.restore(static_dataset(1)[0])
    assert all(p.grad is None for p in model.params.values())
