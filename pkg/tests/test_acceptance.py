"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line with the measured numbers; the
lines are repeated in the terminal summary so they survive output capture.
Run with ``pytest tests/test_acceptance.py -v -s`` to see them inline.
"""

import contextlib
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from oracles import (activation_signature, naive_bev, naive_sfv, numerical_grad, numerical_grad_smooth,
                     rel_error)
from salsanet.cli import main
from salsanet.geometry import format_kitti_calib, parse_kitti_calib
from salsanet.metrics import ConfusionMatrix, class_scores, mean_iou_of
from salsanet.nn import functional as F
from salsanet.nn import tnsr
from salsanet.nn.layers import Mode
from salsanet.nn.model import ResNetBlock, build_salsanet
from salsanet.pointcloud import read_kitti_scan, write_kitti_scan, write_label_file
from salsanet.projection import BevSpec, SfvSpec, project_bev, project_sfv
from salsanet.synthetic import KITTI_LIKE_CALIB, SceneConfig, make_scene
from salsanet.training import (TrainConfig, checkpoint_bytes, class_weights, load_checkpoint, lr_at, predict,
                               train, weighted_ce_loss)

RESULTS = []


@contextlib.contextmanager
def criterion(number, title):
    """Record and print one PASS/FAIL line; ``detail`` collects measured values."""
    detail = {}
    try:
        yield detail
    except BaseException as e:
        line = f"FAIL  criterion {number:2d}  {title}  {_fmt(detail)}  [{type(e).__name__}: {e}]"
        RESULTS.append(line)
        print("\n" + line)
        raise
    line = f"PASS  criterion {number:2d}  {title}  {_fmt(detail)}"
    RESULTS.append(line)
    print("\n" + line)


def _fmt(detail):
    return ", ".join(f"{k}={v}" for k, v in detail.items())


def _frames(seed, n):
    rng = np.random.default_rng(seed)
    return [make_scene(rng, SceneConfig()).cloud for _ in range(n)]


def _scores(net, frames, spec):
    from salsanet.projection import project, rasterize_labels
    grids = np.stack([project(f, spec).to_chw() for f in frames])
    cm = ConfusionMatrix()
    for p, g in zip(predict(net, grids), (rasterize_labels(f, spec) for f in frames)):
        cm.accumulate(p, g)
    return cm


# ---------------------------------------------------------------------------
# 1. gradient checks for every differentiable layer

GRAD_TOL = 1e-3
H = 1e-3
TRIALS = 5


def _layer_cases(rng):
    """(name, [(analytic, numeric, valid)]) for one random draw per layer."""
    out = []

    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    proj = rng.standard_normal((1, 3, 5, 5))
    f = lambda: float((F.conv2d(x, w, b, 1, 1) * proj).sum())
    out.append(("conv3x3", [(g, numerical_grad(f, a, H), None)
                            for g, a in zip(F.conv2d_backward(proj, x, w, 1, 1), (x, w, b))]))

    x, w, b = rng.standard_normal((2, 3, 3, 2)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    proj = rng.standard_normal((2, 2, 6, 4))
    f = lambda: float((F.transposed_conv2d(x, w, b) * proj).sum())
    out.append(("tconv2x2", [(g, numerical_grad(f, a, H), None)
                             for g, a in zip(F.transposed_conv2d_backward(proj, x, w), (x, w, b))]))

    x, gamma, beta = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2), rng.standard_normal(2)
    proj = rng.standard_normal(x.shape)
    f = lambda: float((F.batch_norm_train(x, gamma, beta)[0] * proj).sum())
    grads = F.batch_norm_train_backward(proj, F.batch_norm_train(x, gamma, beta)[1])
    out.append(("batchnorm", [(g, numerical_grad(f, a, H), None) for g, a in zip(grads, (x, gamma, beta))]))

    x = rng.standard_normal((2, 3, 4, 4))
    proj = rng.standard_normal(x.shape)
    num, valid = numerical_grad_smooth(lambda: float((F.leaky_relu(x) * proj).sum()), x,
                                       lambda: (x > 0).tobytes(), H)
    out.append(("leaky_relu", [(F.leaky_relu_backward(proj, x), num, valid)]))

    x = rng.standard_normal((2, 2, 4, 6))
    proj = rng.standard_normal((2, 2, 2, 3))
    num, valid = numerical_grad_smooth(lambda: float((F.max_pool2(x)[0] * proj).sum()), x,
                                       lambda: F.max_pool2(x)[1].tobytes(), H)
    out.append(("max_pool2", [(F.max_pool2_backward(proj, F.max_pool2(x)[1]), num, valid)]))

    x = rng.standard_normal((2, 3, 4, 4))
    proj = rng.standard_normal(x.shape)
    seed = int(rng.integers(2**31))
    f = lambda: float((F.dropout(x, 0.5, np.random.default_rng(seed), True)[0] * proj).sum())
    mask = F.dropout(x, 0.5, np.random.default_rng(seed), True)[1]
    out.append(("dropout", [(F.dropout_backward(proj, mask), numerical_grad(f, x, H), None)]))

    logits = rng.standard_normal((2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    alpha = rng.uniform(0.1, 2.0, 3)
    f = lambda: weighted_ce_loss(logits, labels, alpha)[0]
    out.append(("softmax_weighted_ce", [(weighted_ce_loss(logits, labels, alpha)[1],
                                         numerical_grad(f, logits, H), None)]))

    c_out = int(rng.choice([3, 4]))
    blk = ResNetBlock(3, c_out, rng).astype(np.float64)
    x = rng.standard_normal((1, 3, 5, 5))
    proj = rng.standard_normal((1, c_out, 5, 5))
    f = lambda: float((blk(x, Mode.TRAIN) * proj).sum())
    f()
    gx = blk.backward(proj)
    grads = dict(blk.named_grads())
    sig = lambda: activation_signature(blk)
    checks = [(gx, *numerical_grad_smooth(f, x, sig, H))]
    checks += [(grads[n], *numerical_grad_smooth(f, p, sig, H)) for n, p in blk.named_parameters()]
    out.append(("resnet_block", checks))
    return out


def test_criterion_01_gradient_checks():
    with criterion(1, "layer gradients match central differences") as d:
        t0 = time.perf_counter()
        worst, smooth = {}, {}
        for trial in range(TRIALS):
            for name, checks in _layer_cases(np.random.default_rng(1000 + trial)):
                for analytic, num, valid in checks:
                    if valid is None:
                        valid = np.ones(num.shape, bool)
                    smooth[name] = min(smooth.get(name, 1.0), float(valid.mean()))
                    err = rel_error(np.asarray(analytic)[valid], num[valid])
                    worst[name] = max(worst.get(name, 0.0), err)
        elapsed = time.perf_counter() - t0
        d["trials_per_layer"] = TRIALS
        d["max_rel_error"] = f"{max(worst.values()):.1e}"
        d["seconds"] = f"{elapsed:.1f}"
        bad = {k: f"{v:.1e}" for k, v in worst.items() if not v < GRAD_TOL}
        assert not bad, f"rel error over {GRAD_TOL}: {bad}"
        rough = {k: v for k, v in smooth.items() if v < 0.9}
        assert not rough, f"too many kink crossings: {rough}"
        assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. architecture audit

def _audit_param_count(in_ch=4, enc=(32, 64, 128, 256, 256), dec=(256, 128, 64, 32), classes=3):
    total, c = 0, in_ch
    for e in enc:
        total += 9 * c * e + 2 * e + 9 * e * e + 2 * e
        if c != e:
            total += c * e + 2 * e
        c = e
    for dch in dec:
        total += 4 * c * dch + 2 * dch + 2 * (9 * dch * dch + 2 * dch)
        c = dch
    return total + c * classes + classes


def test_criterion_02_architecture():
    with criterion(2, "parameter count and tensor shapes") as d:
        net = build_salsanet(0)
        t0 = time.perf_counter()
        trace = {}
        x = np.random.default_rng(0).uniform(0, 1, (1, 4, 256, 64)).astype(np.float32)
        out = net.forward(x, Mode.INFER, trace=trace)
        n = net.num_parameters()
        elapsed = time.perf_counter() - t0
        d["params"] = n
        d["audit"] = _audit_param_count()
        d["output"] = tuple(out.shape)
        d["bottleneck"] = trace["bottleneck"]
        d["seconds"] = f"{elapsed:.2f}"
        assert n == d["audit"] == 4_402_147
        assert out.shape == (1, 3, 256, 64) and out.dtype == np.float32
        assert trace["bottleneck"] == (1, 256, 16, 4)
        for i in range(1, 5):
            assert trace[f"enc{i}"] == trace[f"dec{5 - i}"], i
        assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 3. projections against the naive oracles

def test_criterion_03_projection_oracles():
    with criterion(3, "BEV and SFV match naive per-point oracles") as d:
        rng = np.random.default_rng(3)
        bev, sfv = BevSpec(), SfvSpec()
        t0 = time.perf_counter()
        worst = 0.0
        points = 0
        for _ in range(100):
            cloud = random_cloud(rng, int(rng.integers(0, 1001)))
            points += len(cloud)
            raw_o, norm_o, _ = naive_bev(cloud.points, bev)
            raw = project_bev(cloud, bev, normalize=False).data
            norm = project_bev(cloud, bev).data
            img = project_sfv(cloud, sfv).data
            img_o = naive_sfv(cloud.points, sfv)
            assert np.array_equal(raw[..., 3], raw_o[..., 3]), "BEV counts differ"
            assert np.array_equal(img[..., 5], img_o[..., 5]), "SFV mask differs"
            worst = max(worst, float(np.abs(raw - raw_o).max()), float(np.abs(norm - norm_o).max()),
                        float(np.abs(img - img_o).max()))
        elapsed = time.perf_counter() - t0
        d["clouds"] = 100
        d["points"] = points
        d["max_abs_diff"] = f"{worst:.1e}"
        d["seconds"] = f"{elapsed:.1f}"
        assert worst <= 1e-5
        assert elapsed < 30


# ---------------------------------------------------------------------------
# 4. class weights and loss reduction

WORST_ALPHA = []


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-9, 1.0), min_size=3, max_size=3))
def _alpha_property(f):
    alpha = class_weights(np.array(f))
    err = float(np.abs(alpha * np.sqrt(f) - 1).max())
    WORST_ALPHA.append(err)
    assert err <= 1e-7


def test_criterion_04_class_weights_and_loss():
    with criterion(4, "alpha * sqrt(f) = 1 and unit weights give plain cross-entropy") as d:
        WORST_ALPHA.clear()
        _alpha_property()
        d["max_alpha_err"] = f"{max(WORST_ALPHA):.1e}"
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(20):
            logits = rng.standard_normal((2, 3, 6, 5)) * 3
            labels = rng.integers(0, 3, (2, 6, 5))
            loss, _ = weighted_ce_loss(logits, labels, np.ones(3))
            # plain cross-entropy, cell by cell
            terms = []
            for n, i, j in np.ndindex(labels.shape):
                z = logits[n, :, i, j]
                terms.append(math.log(sum(math.exp(v) for v in z)) - z[labels[n, i, j]])
            worst = max(worst, abs(loss - sum(terms) / len(terms)))
        d["max_ce_diff"] = f"{worst:.1e}"
        assert worst <= 1e-6


# ---------------------------------------------------------------------------
# 5. learning-rate schedule

def test_criterion_05_lr_schedule():
    with criterion(5, "step-decay learning rate") as d:
        got = {it: lr_at(it) for it in (0, 19_999, 20_000, 39_999, 40_000)}
        d.update({f"lr[{k}]": v for k, v in got.items()})
        assert got == {0: 0.01, 19_999: 0.01, 20_000: 0.001, 39_999: 0.001, 40_000: 0.0001}


# ---------------------------------------------------------------------------
# 6 and 7. training on synthetic scenes (full-size BEV grid)

OVERFIT_ITERS = 300


def _overfit_config(weighted):
    return TrainConfig(batch_size=2, epochs=10_000, max_iterations=OVERFIT_ITERS, weighted_loss=weighted,
                       augment_flip=False, augment_noise=False, augment_rotate=False, seed=0)


@pytest.fixture(scope="module")
def overfit_frames():
    return _frames(0, 8)


@pytest.fixture(scope="module")
def weighted_run(overfit_frames):
    t0 = time.perf_counter()
    result = train(overfit_frames, _overfit_config(True))
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_06_overfit(overfit_frames, weighted_run, tmp_path):
    with criterion(6, "overfits 8 frames to mean IoU > 0.95") as d:
        result, elapsed = weighted_run
        miou = _scores(result.net, overfit_frames, result.spec).mean_iou()
        d["iterations"] = result.iterations
        d["first_loss"] = f"{result.losses[0]:.3e}"
        d["last_loss"] = f"{result.losses[-1]:.3e}"
        d["train_miou"] = f"{miou:.4f}"
        d["minutes"] = f"{elapsed / 60:.1f}"

        # second route: files on disk, evaluated by the command-line tool
        data = tmp_path / "frames"
        data.mkdir()
        for i, cloud in enumerate(overfit_frames):
            (data / f"{i:06d}.bin").write_bytes(write_kitti_scan(cloud))
            (data / f"{i:06d}.label").write_bytes(write_label_file(cloud.labels))
        ckpt = tmp_path / "model.snck"
        ckpt.write_bytes(result.checkpoint())
        assert main(["eval", str(ckpt), str(data), "--out", str(tmp_path / "m.csv")]) == 0
        cli_miou = float((tmp_path / "m.csv").read_text().splitlines()[-1].split(",")[-1]) / 100
        d["cli_miou"] = f"{cli_miou:.4f}"

        assert result.losses[-1] < result.losses[0]
        assert miou > 0.95
        assert cli_miou > 0.95
        assert abs(cli_miou - miou) < 1e-4
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_criterion_07_class_weighting(overfit_frames, weighted_run):
    with criterion(7, "weighted loss vehicle IoU >= unweighted") as d:
        # same seed, frames and step count; only the loss weighting differs
        weighted, _ = weighted_run
        plain = train(overfit_frames, _overfit_config(False))
        held_out = _frames(7, 8)
        vehicle = {}
        for name, result in (("weighted", weighted), ("unweighted", plain)):
            vehicle[name] = _scores(result.net, held_out, result.spec).class_scores(2)[2]
            d[f"{name}_vehicle_iou"] = f"{vehicle[name]:.4f}"
        d["vehicle_fraction"] = f"{weighted.class_stats.f[2] / weighted.class_stats.f.sum():.4f}"
        assert vehicle["weighted"] >= vehicle["unweighted"]


# ---------------------------------------------------------------------------
# 8. metrics

def test_criterion_08_metrics():
    with criterion(8, "metrics closed form and reference score row consistency") as d:
        cm = ConfusionMatrix(np.array([[5, 5, 0], [5, 0, 0], [0, 0, 0]]))
        p, r, iou = class_scores(cm, 0)
        d["p_r_iou"] = (p, r, round(iou, 6))
        assert (p, r) == (0.5, 0.5) and abs(iou - 1 / 3) < 1e-12
        rows = [(99.46, 98.71, 98.19), (78.24, 89.39, 71.61), (75.13, 89.74, 69.19)]
        mean = mean_iou_of([row[2] for row in rows])
        d["table_mean"] = f"{mean:.2f}"
        assert abs(mean - 79.74) <= 0.1


# ---------------------------------------------------------------------------
# 9. file-format round trips

def test_criterion_09_round_trips(tmp_path):
    with criterion(9, "scan, calibration, tensor and checkpoint round trips") as d:
        rng = np.random.default_rng(9)
        n = 1_843_200 // 16
        blob = np.c_[rng.uniform(-80, 80, (n, 3)), rng.uniform(0, 1, n)].astype("<f4").tobytes()
        assert write_kitti_scan(read_kitti_scan(blob)) == blob
        d["scan_bytes"] = len(blob)

        text = format_kitti_calib(KITTI_LIKE_CALIB)
        again = parse_kitti_calib(text)
        for name in ("cam_projection", "rectification", "lidar_to_cam"):
            assert np.array_equal(getattr(again, name), getattr(KITTI_LIKE_CALIB, name)), name
        assert format_kitti_calib(again) == text

        for shape in ((), (7,), (3, 4), (256, 64, 4), (2, 3, 4, 5)):
            a = (rng.standard_normal(shape) * 50).astype(np.float32)
            tnsr.save_tensor(tmp_path / "t.tnsr", a)
            b = tnsr.load_tensor(tmp_path / "t.tnsr")
            assert b.dtype == np.float32 and b.shape == a.shape
            assert b.tobytes() == a.tobytes()
            assert tnsr.encode_tensor(b) == (tmp_path / "t.tnsr").read_bytes()

        cfg = TrainConfig()
        net = build_salsanet(5, cfg.arch())
        data = checkpoint_bytes(net, cfg.grid_spec(), 17)
        net2, spec2, header = load_checkpoint(data)
        assert checkpoint_bytes(net2, spec2, header["iteration"]) == data
        state, state2 = net.state_dict(), net2.state_dict()
        assert state.keys() == state2.keys()
        assert all(np.array_equal(state[k], state2[k]) for k in state)
        d["checkpoint_bytes"] = len(data)


# ---------------------------------------------------------------------------
# 10. determinism

def test_criterion_10_determinism(tmp_path):
    with criterion(10, "identical seeds give identical checkpoints and logs") as d:
        frames = _frames(10, 4)
        cfg = TrainConfig(batch_size=2, epochs=2, checkpoint_every=2, seed=11)
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            out.mkdir()
            result = train(frames, cfg, out_dir=out)
            (out / "train_log.csv").write_text(result.log_csv())
            (out / "model.snck").write_bytes(result.checkpoint())
            runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        d["files"] = len(runs[0])
        d["iterations"] = result.iterations
        assert len(runs[0]) == 4  # two periodic checkpoints, the log and the final model
        assert runs[0] == runs[1]
        other = train(frames, TrainConfig(batch_size=2, epochs=2, seed=12))
        assert other.checkpoint() != runs[0]["model.snck"]
