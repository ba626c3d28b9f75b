"""Acceptance checks 1-12; each test records one pass/fail line via the ``record`` fixture."""

import json
import math
import time

import numpy as np
import pytest

from sptlv import cli, evaluate, perturb, phantom, spt
from sptlv.evaluate import RobustnessReport, crossval_split
from sptlv.model import build_variant, count_params
from sptlv.objective import CovarianceSet, total_loss, tn_regularizer
from sptlv.perturb import Kind, PerturbationSpec
from sptlv.spt import Variant
from sptlv.tensor import Graph, Tensor, ops
from sptlv.training import TrainConfig, family_mae, train

from test_objective import dense_regularizer, random_spd
from test_tensor_core import lstm_oracle


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ------------------------------------------------------------------ 1
def test_c01_tight_frame(record):
    t0 = time.perf_counter()
    bank = spt.build_filter_bank(80, 80)
    rng = np.random.default_rng(2024)
    images = [rng.random((80, 80)) for _ in range(50)]
    dirac = np.zeros((80, 80))
    dirac[31, 52] = 1.0
    errs = [rel_l2(spt.reconstruct(spt.decompose(x, bank), bank)[0], x) for x in images + [dirac]]
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-6 and elapsed < 5
    record(1, ok, f"max rel err {max(errs):.2e} over 51 images, {elapsed:.2f} s")
    assert ok


# ------------------------------------------------------------------ 2
def test_c02_steerability(record):
    b0 = spt.build_filter_bank(80, 80, offset=0.0)
    b6 = spt.build_filter_bank(80, 80, offset=math.pi / 6)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(5):
        x = rng.standard_normal((80, 80))
        p0, p6 = spt.decompose(x, b0), spt.decompose(x, b6)
        for level in range(len(b0.levels)):
            for k, deg in enumerate((30, 90, 150)):
                steered = spt.steer(p0.oriented[level], math.radians(deg))
                worst = max(worst, rel_l2(steered, p6.oriented[level][k]))
    ok = worst <= 1e-6
    record(2, ok, f"max rel err {worst:.2e} (2 scales x 3 angles x 5 images)")
    assert ok


# ------------------------------------------------------------------ 3
def test_c03_parameter_counts(record):
    c = count_params(build_variant(Variant.SPT_SC_L, 1.0))
    layers = [c[k] for k in ("conv1", "conv2", "conv3", "conv4", "conv5", "fc")]
    ok = layers == [9000, 180360, 720720, 1038240, 2075040, 48100] and c["cnn_total"] == 4_071_460
    record(3, ok, f"layers {layers}, total {c['cnn_total']}")
    assert ok


# ------------------------------------------------------------------ 4
def pool_windows(h):
    """The four corners of every 2x2 window, in max_pool2's tie-breaking order."""
    B, C, H, W = h.shape
    win = h.reshape(B, C, H // 2, 2, W // 2, 2)
    return [win[:, :, :, r, :, c] for r in (0, 1) for c in (0, 1)]


class StagedNet:
    """Cached block activations so a perturbed coordinate only recomputes its suffix.

    Every evaluation also records the switch pattern of the piecewise-linear
    ops (relu masks, max-pool winners, residual signs). With ``frozen`` set,
    relu and max-pool reuse the base pattern instead, which evaluates the
    smooth piece the analytic gradient belongs to.
    """

    def __init__(self, net, frames, targets, cov, drop_seed):
        self.net, self.targets, self.cov, self.drop_seed = net, targets, cov, drop_seed
        self.frames = frames
        self.frozen, self.base = False, {}
        self.org = net.organize(frames).data
        self.conv_out, self.block_in = {}, {1: self.org}
        self.pattern = {}
        h = self.org
        for i in range(1, 6):
            c = self.conv(i, h)
            self.conv_out[i] = c
            h = self.post(i, c)
            self.block_in[i + 1] = h
        self.feat_in = h
        self.d = self.fc(h)
        self.loss_from_features(self.d)
        self.base = self.pattern
        self.pattern = {}

    def conv(self, i, h):
        p = self.net.params
        k = p[f"conv{i}.weight"].shape[-1]
        return ops.conv2d(h, p[f"conv{i}.weight"].data, p[f"conv{i}.bias"].data, padding=k // 2).data

    def post(self, i, c):
        p = self.net.params
        h = ops.batch_norm(c, p[f"bn{i}.gamma"].data, p[f"bn{i}.beta"].data, self.net.stats[i - 1], True).data
        h = h.transpose(1, 0, 2, 3)             # contiguous channel-major buffer
        self.pattern[f"relu{i}"] = live = h > 0
        h = h * (self.base[f"relu{i}"] if self.frozen else live)
        if i < 5:
            a, b, c, d = pool_windows(h)
            top = np.maximum(np.maximum(a, b), np.maximum(c, d))
            self.pattern[f"pool{i}"] = np.where(a == top, 0, np.where(b == top, 1, np.where(c == top, 2, 3)))
            h = np.choose(self.base[f"pool{i}"], (a, b, c, d)) if self.frozen else top
        return h.transpose(1, 0, 2, 3)

    def fc(self, h):
        p = self.net.params
        h = ops.l2_pool(h)
        h = ops.reshape(h, (h.shape[0], h.shape[1]))
        h = ops.linear(h, p["fc.weight"].data, p["fc.bias"].data)
        return ops.dropout(h, self.net.dropout, np.random.default_rng(self.drop_seed), True).data

    def loss_from_features(self, d):
        net = self.net
        net.cnn_forward = lambda *a, **k: Tensor(d)
        try:
            pred = net.sequence_forward(d, len(self.frames), train=True)
        finally:
            del net.cnn_forward
        self.pattern["residual"] = pred.data > self.targets
        return total_loss(pred, self.targets, net.params["head.weight"].data, self.cov).item()

    def crossed(self):
        """Whether the last evaluation switched any piece relative to the base point."""
        return any(not np.array_equal(v, self.base[k]) for k, v in self.pattern.items())

    def from_block(self, i, conv_i):
        h = self.post(i, conv_i)
        for j in range(i + 1, 6):
            h = self.post(j, self.conv(j, h))
        return self.loss_from_features(self.fc(h))

    def loss_for(self, name):
        """Loss after an in-place change to parameter ``name``."""
        self.pattern = {}
        layer = name.split(".")[0]
        if layer.startswith("conv"):
            i = int(layer[4:])
            return self.from_block(i, self.conv(i, self.block_in[i]))
        if layer.startswith("bn"):
            return self.from_block(int(layer[2:]), self.conv_out[int(layer[2:])])
        if layer == "fc":
            return self.loss_from_features(self.fc(self.feat_in))
        return self.loss_from_features(self.d)

    def loss_input(self, frames, b, t):
        self.pattern = {}
        g = self.net.groups
        items = slice((b * 20 + t) * g, (b * 20 + t + 1) * g)
        org_t = self.net.organize(frames[b:b + 1, t:t + 1]).data
        c1 = self.conv_out[1].copy()
        p = self.net.params
        k = p["conv1.weight"].shape[-1]
        c1[items] = ops.conv2d(org_t, p["conv1.weight"].data, p["conv1.bias"].data, padding=k // 2).data
        return self.from_block(1, c1)


# samples per tensor: fewer where a re-evaluation is expensive
AUDIT_ALLOCATION = {"conv1": 2, "bn1": 1, "conv2": 3, "bn2": 2, "conv3": 6, "bn3": 4,
                    "conv4": 15, "bn4": 10, "conv5": 20, "bn5": 12, "fc": 25}
AUDIT_TOTAL, AUDIT_INPUT = 500, 6


def audit_coordinates(net, rng):
    coords = []
    for name, t in net.params.items():
        n = AUDIT_ALLOCATION.get(name.split(".")[0], 0)
        if name.endswith("bias") and name.startswith("conv"):
            n = max(2, n // 2)
        coords += [(name, tuple(int(v) for v in np.unravel_index(j, t.shape)))
                   for j in rng.choice(t.size, size=min(n, t.size), replace=False)]
    coords += [("input", (int(rng.integers(2)), int(rng.integers(20)), int(rng.integers(10, 70)), int(rng.integers(10, 70))))
               for _ in range(AUDIT_INPUT)]
    # the rest goes to the recurrent and head tensors, where evaluations are cheap
    tail = sorted((n for n in net.params if n.startswith(("lstm", "head"))), key=lambda n: net.params[n].size)
    for k, name in enumerate(tail):
        t = net.params[name]
        n = min(t.size, (AUDIT_TOTAL - len(coords)) // (len(tail) - k))
        coords += [(name, tuple(int(v) for v in np.unravel_index(j, t.shape)))
                   for j in rng.choice(t.size, size=n, replace=False)]
    return coords


def central_difference(staged, frames, name, idx, h):
    """Central difference of the staged loss; also reports whether the stencil switched a piece."""
    vals, crossed = [], False
    arr = frames if name == "input" else staged.net.params[name].data
    old = arr[idx]
    for sgn in (1, -1):
        arr[idx] = old + sgn * h
        vals.append(staged.loss_input(arr, idx[0], idx[1]) if name == "input" else staged.loss_for(name))
        crossed |= staged.crossed()
    arr[idx] = old
    return (vals[0] - vals[1]) / (2 * h), crossed


def test_c04_gradient_audit(record, small_dataset):
    t0 = time.perf_counter()
    net = build_variant(Variant.SPT_SC_L, 0.25, seed=21, dtype=np.float64)
    rng = np.random.default_rng(99)
    subs = small_dataset[:2]
    frames = np.stack([s.frames for s in subs]).astype(np.float64)
    targets = np.stack([phantom.normalize(s.truth, s.spacing, s.shape) for s in subs])
    cov = CovarianceSet(*(random_spd(rng, d) / d for d in net.head_shape), lam=1e-3)
    drop_seed = 77

    x = Tensor(frames.copy(), requires_grad=True)
    for p in net.params.values():
        p.grad = None
    with Graph() as g:
        pred = net.forward(x, train=True, rng=np.random.default_rng(drop_seed))
        loss = total_loss(pred, targets, net.params["head.weight"], cov)
    g.backward(loss)
    analytic = {k: p.grad.copy() for k, p in net.params.items()}
    analytic["input"] = x.grad.copy()

    staged = StagedNet(net, frames, targets, cov, drop_seed)
    base = staged.loss_from_features(staged.d)
    assert abs(base - loss.item()) <= 1e-12 * abs(base)

    coords = audit_coordinates(net, rng)
    assert len(coords) == AUDIT_TOTAL
    h, tol = 1e-4, 1e-4
    rel = lambda a, n: abs(a - n) / max(abs(a), abs(n), 1e-6)
    plain_good, good, crossed_n, bad = 0, 0, 0, set()
    for name, idx in coords:
        a = analytic[name][idx]
        num, crossed = central_difference(staged, frames, name, idx, h)
        crossed_n += crossed
        ok = rel(a, num) <= tol
        plain_good += ok
        if not ok and crossed:
            # the stencil left the smooth piece at the sample point; difference on that piece instead
            staged.frozen = True
            try:
                num, _ = central_difference(staged, frames, name, idx, h)
            finally:
                staged.frozen = False
            ok = rel(a, num) <= tol
        good += ok
        if not ok:
            bad.add(name)
    elapsed = time.perf_counter() - t0
    ok = good >= 0.99 * AUDIT_TOTAL and elapsed < 120
    record(4, ok, f"{good}/{AUDIT_TOTAL} coordinates within {tol:g} ({plain_good} by plain differences, "
                  f"{crossed_n} stencils crossed a relu/max-pool switch; {elapsed:.0f} s)"
                  + (f"; misses in {sorted(bad)}" if bad else ""))
    assert ok


# ------------------------------------------------------------------ 5
def test_c05_lstm_oracle(record):
    net = build_variant(Variant.SPT_SC_L, 0.25, seed=4, dtype=np.float64)
    rng = np.random.default_rng(8)
    for name, t in net.params.items():
        if name.startswith(("lstm", "head")):
            t.data[...] = rng.standard_normal(t.shape) * (0.3 if name.startswith("lstm.W") else 1.0)
    for st in net.stats:
        st.mean[...] = rng.normal(0, 0.1, st.mean.shape)
        st.var[...] = rng.uniform(0.5, 2.0, st.var.shape)
        st.updates = 1
    org = net.organize(rng.random((1, 20, 80, 80))).data
    got = net.sequence_forward(org, 1).data[0]
    d = net.cnn_forward(org).data.reshape(20, 3, 100)

    W = {k.split(".", 1)[1]: v.data for k, v in net.params.items() if k.startswith("lstm.")}
    Wh, bh = net.params["head.weight"].data, net.params["head.bias"].data
    ref = np.zeros((20, 11))
    state = [(np.zeros((1, 100)), np.zeros((1, 100))) for _ in range(3)]
    for t in range(20):
        heads = []
        for gi in range(3):
            hs, cs = lstm_oracle(d[t, gi][None], *state[gi], W)
            state[gi] = (hs, cs)
            heads.append([bh[gi, r] + sum(Wh[gi, r, u] * hs[0, u] for u in range(100)) for r in range(5)])
        ref[t, 0] = sum(hd[0] for hd in heads) / 3
        ref[t, 1] = sum(hd[1] for hd in heads) / 3
        for gi in range(3):
            ref[t, 2 + gi] = heads[gi][2]
            ref[t, 5 + gi] = heads[gi][3]
            ref[t, 8 + gi] = heads[gi][4]
    err = float(np.abs(got - ref).max())
    ok = err <= 1e-10
    record(5, ok, f"max abs diff {err:.2e} over 20 frames x 11 indices")
    assert ok


# ------------------------------------------------------------------ 6
def test_c06_regularizer(record):
    rng = np.random.default_rng(6)
    W = rng.standard_normal((3, 5, 100))
    lam = 1e-3
    via_loss = total_loss(np.zeros((1, 11)), np.zeros((1, 11)), W, CovarianceSet.identity(lam=lam)).item()
    e_id = abs(via_loss - lam * (W ** 2).sum())
    e_id = max(e_id, abs(tn_regularizer(W, CovarianceSet.identity()).item() - (W ** 2).sum()))
    e_dense = 0.0
    for s in range(10):
        r = np.random.default_rng(100 + s)
        cov = CovarianceSet(*(random_spd(r, d) for d in (2, 2, 3)))
        Ws = r.standard_normal((2, 2, 3))
        e_dense = max(e_dense, abs(tn_regularizer(Ws, cov).item() - dense_regularizer(Ws, cov)))
    ok = e_id <= 1e-12 and e_dense <= 1e-9
    record(6, ok, f"identity reduction err {e_id:.1e}, Kronecker vs dense {e_dense:.1e}")
    assert ok


# ------------------------------------------------------------------ 7
class InjectedError:
    variant = Variant.BASELINE

    def __init__(self, subjects, clean_err, perturbed_err):
        self.subjects = subjects
        self.clean = np.stack([s.frames for s in subjects])
        self.errs = (clean_err, perturbed_err)

    def predict(self, frames, batch_subjects=4):
        e = self.errs[0] if np.array_equal(frames, self.clean) else self.errs[1]
        return np.stack([phantom.normalize(s.truth.astype(np.float64) + e, s.spacing, s.shape)
                         for s in self.subjects])


def test_c07_ratio_identities(record, small_dataset):
    grid = [PerturbationSpec(k, lv) for k in (Kind.GAUSSIAN, Kind.ROTATE, Kind.JPEG) for lv in (1, 2)]
    reports = []
    net = build_variant(Variant.BASELINE, 0.25, seed=1)
    reports.append(evaluate.sweep(net, small_dataset[:2], grid, seed=0))
    subs = [phantom.generate_subject(phantom.PhantomConfig(size=(64, 64), spacing=1.0, radius_ed=10.0,
                                                           thickness=4.0, seed=s, subject_id=s))
            for s in range(3)]
    single = evaluate.sweep(InjectedError(subs, 0.25, 0.5), subs, grid, seed=0, variant="x")
    double = evaluate.sweep(InjectedError(subs, 0.25, 1.0), subs, grid, seed=0, variant="x")
    reports += [single, double]
    reports.append(RobustnessReport.from_csv(reports[0].to_csv()))
    clean_ok = all(np.array_equal(r.ratio("None", 0), np.ones(11)) for r in reports)
    doubling_ok = all(np.array_equal(double.ratio(s.kind, s.level), 2 * single.ratio(s.kind, s.level))
                      for s in grid)
    exact_two = all(np.array_equal(single.ratio(s.kind, s.level), np.full(11, 2.0)) for s in grid)
    ok = clean_ok and doubling_ok and exact_two
    record(7, ok, f"R(p=0)=1 in {len(reports)} reports: {clean_ok}; doubled error doubles R exactly: {doubling_ok}")
    assert ok


# ------------------------------------------------------------------ 8
def test_c08_perturbation_ladders(record, small_dataset):
    x = np.full((80, 80), 0.5)
    rate = np.mean([np.isin(perturb.apply_distortion(x, Kind.IMPULSE, 5, np.random.default_rng(s)),
                            (0.0, 1.0)).mean() for s in range(100)])
    sigma = perturb.GAUSSIAN_SIGMA[2]
    rice = np.mean([perturb.apply_distortion(np.zeros((80, 80)), Kind.RICIAN, 3,
                                             np.random.default_rng(s)).mean() for s in range(50)])
    rice_err = abs(rice / (sigma * math.sqrt(math.pi / 2)) - 1)
    degrees = [s.magnitude for s in perturb.ladder(Kind.ROTATE)]
    net = build_variant(Variant.SPT_SC_L, 0.25, seed=0)
    frames = np.stack([s.frames for s in small_dataset[:2]])
    targets = np.stack([phantom.normalize(s.truth, s.spacing, s.shape) for s in small_dataset[:2]])
    pgd0 = perturb.pgd_attack(net, frames, targets, 0.0, 100)
    ok = (abs(rate - 0.27) <= 0.02 and rice_err <= 0.02 and degrees == [3.0 * k for k in range(1, 11)]
          and np.array_equal(pgd0, frames))
    record(8, ok, f"impulse rate {rate:.4f}; Rician/Rayleigh {1 + rice_err:.4f}; "
                  f"rotation {degrees[0]:g}..{degrees[-1]:g} deg; PGD alpha=0 identity")
    assert ok


# ------------------------------------------------------------------ 9
def test_c09_phantom_truth(record):
    worst = 0.0
    for k in range(100):
        cfg = phantom.PhantomConfig.sample(seed=500 + k, subject_id=k)
        for t in (0, 5, 10, 15):
            g = phantom.frame_geometry(cfg, t)
            ana = phantom.analytic_indices(g, cfg.spacing)
            ras = phantom.rasterize_indices(*phantom.masks(g, cfg.size, 6), cfg.spacing / 6)
            worst = max(worst, float(np.max(np.abs(ras - ana) / ana)))
    ok = worst <= 0.02
    record(9, ok, f"worst relative deviation {worst:.4f} over 100 configs x 4 frames")
    assert ok


# ------------------------------------------------------------- 10, 11
NOISE = [PerturbationSpec(k, lv) for k in (Kind.GAUSSIAN, Kind.RICIAN) for lv in range(1, 6)]
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    data = phantom.generate_dataset(20, seed=7)
    fold = crossval_split([s.subject_id for s in data], seed=0)[0]
    by_id = {s.subject_id: s for s in data}
    tr, va, te = ([by_id[i] for i in ids] for ids in (fold.train, fold.val, fold.test))
    runs = {}
    for seed in SEEDS:
        for v in (Variant.SPT_SC_L, Variant.BASELINE):
            net = build_variant(v, 0.25, seed=seed)
            res = train(net, tr, va, TrainConfig(epochs=30, seed=seed))
            rep = evaluate.sweep(res.model, te, NOISE, seed=seed)
            runs[(v, seed)] = {"result": res, "report": rep}
    return {"runs": runs, "train": tr, "val": va, "test": te, "elapsed": time.perf_counter() - t0}


def test_c10_desk_scale_trend(record, desk_runs):
    runs = desk_runs["runs"]
    area = {}
    ratio = {}
    for (v, seed), r in runs.items():
        area[(v, seed)] = float(np.mean(r["report"].clean[:2]))
        ratio[(v, seed)] = r["report"].mean_ratio([Kind.GAUSSIAN, Kind.RICIAN])
    sc = np.mean([area[(Variant.SPT_SC_L, s)] for s in SEEDS])
    bl = np.mean([area[(Variant.BASELINE, s)] for s in SEEDS])
    wins = sum(ratio[(Variant.SPT_SC_L, s)] < ratio[(Variant.BASELINE, s)] for s in SEEDS)
    elapsed = desk_runs["elapsed"]
    ok = sc <= 2 * bl and wins >= 2 and elapsed < 3600
    per_seed = ", ".join(f"s{s}: R {ratio[(Variant.SPT_SC_L, s)]:.2f} vs {ratio[(Variant.BASELINE, s)]:.2f}"
                         for s in SEEDS)
    record(10, ok, f"area MAE {sc:.1f} vs {bl:.1f} mm^2; lower R in {wins}/3 seeds ({per_seed}); "
                   f"{elapsed / 60:.1f} min")
    assert ok


def test_c11_pgd_severity(record, desk_runs):
    net = desk_runs["runs"][(Variant.SPT_SC_L, 0)]["result"].model
    alpha = 8 / 255
    grid = [PerturbationSpec.pgd(alpha, 50), PerturbationSpec.pgd(alpha, 100)]
    rep = evaluate.sweep(net, desk_runs["test"], grid, seed=0)
    m50 = float(np.mean(rep.cells[("PGD", grid[0].level)][0]))
    m100 = float(np.mean(rep.cells[("PGD", grid[1].level)][0]))
    ok = m100 >= m50
    record(11, ok, f"mean MAE 50 iters {m50:.2f}, 100 iters {m100:.2f} (clean {rep.clean.mean():.2f})")
    assert ok


def test_training_loss_trend(desk_runs):
    # epoch 1 runs with identity covariances; later epochs carry a constant log-det
    # offset from the first update, so the trend is read from epoch 2 onwards
    for seed in SEEDS:
        h = desk_runs["runs"][(Variant.SPT_SC_L, seed)]["result"].history
        loss = [r["train_loss"] for r in h if 2 <= r["epoch"] <= 10]
        assert loss[-1] < loss[0]


@pytest.mark.xfail(strict=True, reason="about 150 Adam steps from zero-initialised heads, and the "
                                       "2-subject validation set triggers an early lr decay")
def test_beats_constant_predictor_on_areas(desk_runs):
    truth = lambda subs: np.concatenate([s.truth[:, :2] for s in subs])
    const = float(np.abs(truth(desk_runs["val"]) - truth(desk_runs["train"]).mean(0)).mean())
    for seed in SEEDS:
        res = desk_runs["runs"][(Variant.SPT_SC_L, seed)]["result"]
        assert family_mae(res.model, desk_runs["val"])["areas"] < const


# ------------------------------------------------------------------ 12
def test_c12_determinism(record, tmp_path):
    data = tmp_path / "d.pqds"
    cfg = {"variant": "SPT-SC-L", "dataset": str(data), "phantom": {"subjects": 5, "seed": 11},
           "training": {"epochs": 2, "seed": 3}, "folds": [0],
           "grid": [{"kind": "GaussianNoise", "levels": [2]}, {"kind": "ImpulseNoise", "levels": [1]},
                    {"kind": "Rotate", "levels": [4]}, {"kind": "Jpeg", "levels": [3]}]}
    outputs = []
    for run in ("a", "b"):
        c = cli.normalize_config({**cfg, "output_dir": str(tmp_path / run)})
        if run == "a":
            cli.cmd_gen_data(c)
        cli.cmd_train(c)
        cli.cmd_sweep(c)
        d = tmp_path / run / "SPT_SC_L"
        outputs.append({p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))})
    same = outputs[0] == outputs[1]
    names = sorted(outputs[0])
    ok = same and "report_fold0.csv" in names and "report_mean.csv" in names
    record(12, ok, f"{len(names)} CSV files byte-identical across re-runs: {same}")
    assert ok
