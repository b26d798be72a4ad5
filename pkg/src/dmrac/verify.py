"""Invariant suite behind ``dmrac verify``.

Every check is cheap and self-contained; the whole suite runs in well under
two minutes on one core. ``run_suite(inject="gradient")`` swaps in a broken
backprop routine so the harness can be shown to catch it.
"""

import io
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import bounds as bnd
from .adaptive_law import OuterWeights, make_gains, outer_step, total_control
from .cli import main as cli_main
from .cli import run_mode
from .closed_loop import run_baseline, run_episode, run_frozen, snapshot_violations
from .config import BUILTIN, build, load_scenario
from .deepnet import TrainBatch, batch_gradient, batch_loss, init_network, sgd_step, with_output
from .numerics import gaussian_vector, make_rng, rk4_step, solve_lyapunov, sym_eig_bounds
from .plant import (
    PlantModel,
    UncertaintySpec,
    build_matched_pair,
    eval_uncertainty,
    plant_derivative,
    reference_derivative,
)
from .replay_buffer import (
    BufferEntry,
    ReplayBuffer,
    evict_svd_max,
    kernel_score,
    try_insert,
)


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str
    seconds: float


def random_hurwitz(rng, n):
    """Random stable matrix: random A shifted left of its spectral abscissa."""
    A = rng.normal(size=(n, n))
    shift = max(np.linalg.eigvals(A).real) + rng.uniform(0.1, 2.0)
    return A - shift * np.eye(n)


def random_spd(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


def _broken_gradient(net, batch):
    g_inner, g_out = batch_gradient(net, batch)
    if g_inner:
        g = g_inner[0].copy()
        g[0, 0] *= 1.5
        g_inner = (g,) + g_inner[1:]
    return g_inner, g_out


def finite_difference_gradient(net, batch, h=1e-6):
    """Central differences of batch_loss with respect to every weight."""
    layers = list(net.inner) + [net.output]
    out = []
    for li, w in enumerate(layers):
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            vals = []
            for s in (h, -h):
                trial = [a.copy() for a in layers]
                trial[li][idx] += s
                vals.append(batch_loss(type(net)(tuple(trial[:-1]), trial[-1]), batch))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return tuple(out[:-1]), out[-1]


# ---------------------------------------------------------------- numerics


def check_lyapunov(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 7))
        A = random_hurwitz(rng, n)
        Q = random_spd(rng, n)
        P = solve_lyapunov(A, Q)
        res = np.linalg.norm(A.T @ P + P @ A + Q) / np.linalg.norm(Q)
        worst = max(worst, res)
        if not np.array_equal(P, P.T):
            return False, "P not symmetric"
        xs = rng.normal(size=(100, n))
        if np.any(np.einsum("ti,ij,tj->t", xs, P, xs) <= 0):
            return False, "x^T P x <= 0"
    return worst <= 1e-10, f"max relative residual {worst:.2e}"


def check_rayleigh(rng):
    for _ in range(20):
        n = int(rng.integers(1, 7))
        M = rng.normal(size=(n, n))
        S = M + M.T
        lo, hi = sym_eig_bounds(S)
        v = rng.normal(size=(100, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        q = np.einsum("ti,ij,tj->t", v, S, v)
        slack = 1e-12 * max(1.0, abs(lo), abs(hi))
        if q.min() < lo - slack or q.max() > hi + slack:
            return False, "Rayleigh quotient outside [lambda_min, lambda_max]"
    return True, "100 random unit vectors x 20 matrices"


def check_rk4_order():
    errs = []
    for dt in (0.1, 0.05):
        x = np.array([1.0])
        for i in range(int(round(1.0 / dt))):
            x = rk4_step(lambda t, y: -y, x, i * dt, dt)
        errs.append(abs(x[0] - np.exp(-1.0)))
    order = np.log2(errs[0] / errs[1])
    return 3.8 <= order <= 4.2, f"observed order {order:.3f}"


def check_noise_reproducible():
    a = [gaussian_vector(make_rng(7), 0.01, 3) for _ in range(2)]
    return np.array_equal(a[0], a[1]), "seeded draws identical"


# ------------------------------------------------------------------- plant


def check_matched_pair(rng):
    for _ in range(20):
        A = np.array([[0.0, 1.0], rng.normal(size=2)])
        B = np.array([[0.0], [rng.uniform(0.5, 2.0)]])
        K = np.array([[rng.uniform(1, 20) / B[1, 0] + A[1, 0] / B[1, 0], rng.uniform(1, 10) / B[1, 0] + A[1, 1] / B[1, 0]]])
        ref = build_matched_pair(A, B, K, np.array([[1.0]]))
        if not np.array_equal(A - B @ K - ref.A_rm, np.zeros_like(A)):
            return False, "A - BK - A_rm != 0"
        x = rng.normal(size=2)
        plant = PlantModel(A, B, UncertaintySpec("zero", m=1))
        if not np.allclose(plant_derivative(plant, x, -K @ x), reference_derivative(ref, x, np.zeros(1)), rtol=0, atol=1e-12):
            return False, "closed-loop equivalence failed"
    return True, "20 random matched pairs"


def check_uncertainty_deterministic(rng):
    spec = load_scenario("desk-attitude").uncertainty
    for _ in range(50):
        x = rng.normal(size=2)
        if not np.array_equal(eval_uncertainty(spec, x), eval_uncertainty(spec, x)):
            return False, "repeated evaluation differs"
    return True, "50 points bitwise stable"


# ----------------------------------------------------------------- deepnet


def _random_net_and_batch(rng):
    depth = int(rng.integers(1, 4))
    n = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 9)) for _ in range(depth)]
    m = int(rng.integers(1, 3))
    net = init_network([n] + widths, m, rng, output=rng.normal(size=(widths[-1], m)))
    M = int(rng.integers(1, 5))
    return net, TrainBatch(rng.normal(size=(M, n)), rng.normal(size=(M, m)))


def check_gradient(rng, gradient=batch_gradient):
    worst = 0.0
    for _ in range(20):
        net, batch = _random_net_and_batch(rng)
        g_inner, g_out = gradient(net, batch)
        f_inner, f_out = finite_difference_gradient(net, batch)
        for g, f in zip(g_inner + (g_out,), f_inner + (f_out,)):
            rel = np.abs(g - f) / np.maximum(1.0, np.abs(f))
            worst = max(worst, float(rel.max(initial=0.0)))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def check_descent(rng):
    for _ in range(20):
        net, batch = _random_net_and_batch(rng)
        g_inner, g_out = batch_gradient(net, batch)
        gnorm = np.sqrt(sum(np.sum(g * g) for g in g_inner + (g_out,)))
        if gnorm <= 1e-6:
            continue
        before = batch_loss(net, batch)
        after = batch_loss(sgd_step(net, batch, 1e-4), batch)
        if after > before + 1e-12:
            return False, f"loss rose {before:.6g} -> {after:.6g}"
    return True, "eta = 1e-4 never increases the loss"


def check_feature_bound(rng):
    for _ in range(20):
        net, _ = _random_net_and_batch(rng)
        X = rng.normal(scale=10.0, size=(50, net.n))
        norms = np.linalg.norm(np.array([net.forward_features(x) for x in X]), axis=1)
        if norms.max() > np.sqrt(net.k) + 1e-12:
            return False, "||Phi|| > sqrt(k)"
    return True, "||Phi(x)|| <= sqrt(k)"


def check_net_deterministic(rng):
    net, batch = _random_net_and_batch(rng)
    a, b = batch_gradient(net, batch), batch_gradient(net, batch)
    same = batch_loss(net, batch) == batch_loss(net, batch)
    same &= all(np.array_equal(x, y) for x, y in zip(a[0] + (a[1],), b[0] + (b[1],)))
    s1, s2 = sgd_step(net, batch, 0.01), sgd_step(net, batch, 0.01)
    same &= all(np.array_equal(x, y) for x, y in zip(s1.inner + (s1.output,), s2.inner + (s2.output,)))
    return bool(same), "loss, gradient and update bitwise equal"


# ------------------------------------------------------------ adaptive law


def _law_setup():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    K = np.array([[16.0, 4.0]])
    ref = build_matched_pair(A, B, K, np.array([[16.0]]))
    return A, B, K, ref


def check_projection(rng):
    A, B, K, ref = _law_setup()
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 6))
        gains = make_gains(ref.A_rm, K, np.array([[16.0]]), rng.uniform(0.1, 50.0) * np.eye(k), np.eye(2))
        bound = rng.uniform(0.1, 5.0)
        eps = rng.uniform(0.01, 1.0)
        w = OuterWeights(np.zeros((k, 1)), bound, eps)
        for _ in range(50):
            phi = rng.normal(scale=10.0, size=k)
            e = rng.normal(scale=10.0, size=2)
            w = outer_step(w, phi, e, gains, B, rng.uniform(1e-3, 1.0))
            worst = max(worst, w.norm / (bound * (1 + eps)))
    return worst <= 1.0, f"max ||W|| / (W_b (1 + eps)) = {worst:.4f}"


def check_matched_cancellation(rng):
    A, B, K, ref = _law_setup()
    spec = load_scenario("desk-attitude").uncertainty
    plant = PlantModel(A, B, spec)
    gains = make_gains(ref.A_rm, K, np.array([[16.0]]), np.eye(2), np.eye(2))
    for _ in range(50):
        x, r = rng.normal(size=2), rng.normal(size=1)
        u = total_control(gains, x, r, eval_uncertainty(spec, x))
        lhs = plant_derivative(plant, x, u)
        rhs = ref.A_rm @ x + ref.B_rm @ r
        if not np.allclose(lhs, rhs, rtol=0, atol=1e-10):
            return False, "nu_ad = Delta does not give reference dynamics"
    return True, "50 random (x, r)"


def _structured_run(eps_bar=0.0):
    c = load_scenario("structured")
    if eps_bar:
        u = replace(c.uncertainty, offset=np.full(c.m, eps_bar / np.sqrt(c.m)))
        c = replace(c, uncertainty=u)
    setup = build(c)
    trace, _, _ = run_mode(setup, "mrac-fixed-basis")
    return setup, trace


def check_structured_lyapunov(cache):
    setup, trace = cache["lyap"]
    G = setup.basis_gains
    V = bnd.lyapunov_series(trace, G.P, G.Gamma, setup.w_star)
    rise = float(np.max(np.diff(V)))
    res = float(np.max(np.abs(bnd.vdot_residual(trace, G.P, G.Q, G.Gamma, setup.w_star))))
    ok = rise <= 1e-6 and res <= 1e-3
    return ok, f"max V increase {rise:.2e}, max |V' residual| {res:.2e}"


def check_uub(cache):
    setup, trace = cache["lyap-disturbed"]
    G = setup.basis_gains
    radius = bnd.uub_radius(G.P, G.Q, 0.1)
    e = trace.e_norm
    tail = e[len(e) // 3:]
    ok = tail.max() <= 2 * radius and e.min() <= radius
    return ok, f"radius {radius:.4f}, max ||e|| after first third {tail.max():.4f}"


# ------------------------------------------------------------ replay buffer


def brute_force_eviction(features):
    """Index whose removal maximizes sigma_min, by direct SVD of each remainder."""
    scores = []
    for i in range(features.shape[0]):
        rest = np.delete(features, i, axis=0)
        scores.append(np.linalg.svd(rest, compute_uv=False)[-1] if rest.size else 0.0)
    scores = np.array(scores)
    top = scores.max()
    return int(np.flatnonzero(scores >= top - 1e-9 * max(1.0, top))[0])


def check_buffer(rng):
    cap, zeta = 15, 0.05
    buf = ReplayBuffer(cap, zeta, 2, 4, 1)
    history = []
    for _ in range(3000):
        phi = rng.normal(size=4)
        before = buf.features.copy()
        if try_insert(buf, BufferEntry(rng.normal(size=2), phi, rng.normal(size=1))):
            history.append((phi, before))
        if len(buf) > cap:
            return False, "capacity exceeded"
    for (phi, before), rec in zip(history, [a for a in buf.log if a.admitted]):
        d = np.sum((before - phi) ** 2, axis=1) / np.linalg.norm(phi)
        if (d.min() if d.size else np.inf) < zeta or rec.score < zeta:
            return False, "admitted entry below zeta_tol"
    for _ in range(50):
        p, k = int(rng.integers(1, 21)), int(rng.integers(1, 8))
        b = ReplayBuffer(p, 1e-9, 1, k, 1)
        feats = rng.normal(size=(p, k))
        b._phis[:p] = feats
        b.size = p
        expect = brute_force_eviction(feats)
        if evict_svd_max(b) != expect:
            return False, "eviction disagrees with brute force"
    b = ReplayBuffer(30, 1e-9, 1, 3, 1)
    for phi in rng.normal(size=(10, 3)):
        try_insert(b, BufferEntry(np.zeros(1), phi, np.zeros(1)))
    probe = rng.normal(size=3)
    s1 = kernel_score(probe, b)
    b._phis[: b.size] = b._phis[: b.size][::-1].copy()
    if kernel_score(probe, b) != s1:
        return False, "kernel score depends on order"
    return True, f"{len(history)} admissions, 50 eviction oracles"


# -------------------------------------------------------------- closed loop


def check_determinism(cache):
    for name in BUILTIN:
        if name not in cache:
            return False, f"{name}: run failed"
        setup = build(load_scenario(name))
        again = run_mode(setup, setup.config.dmrac.mode)[0]
        if not np.array_equal(cache[name].rows(), again.rows(), equal_nan=True):
            return False, f"{name}: traces differ"
    return True, "every shipped scenario reproduces bitwise"


def check_mode_reductions():
    setup = build(load_scenario("desk-attitude"), T=20.0)
    kw = setup.run_kwargs()
    cfg = replace(setup.config.dmrac, train_every=None, w_bound=float("inf"))
    adaptive = run_episode(cfg, setup.plant, setup.refmodel, setup.gains, setup.net, **kw).trace
    base = run_baseline(replace(cfg, mode="mrac-fixed-basis"), setup.plant, setup.refmodel, setup.gains,
                        setup.net.forward_features, **kw)
    if not np.array_equal(adaptive.x, base.x) or not np.array_equal(adaptive.nu_ad, base.nu_ad):
        return False, "adaptive without training differs from fixed-feature MRAC"
    zero = with_output(setup.net, np.zeros_like(setup.net.output))
    frozen = run_frozen(replace(cfg, mode="dmrac-frozen"), setup.plant, setup.refmodel, setup.gains, zero, **kw)
    none = run_baseline(replace(cfg, mode="no-adaptation"), setup.plant, setup.refmodel, setup.gains, **kw)
    if not np.array_equal(frozen.x, none.x):
        return False, "frozen with zero output differs from no-adaptation"
    return True, "both reductions hold bitwise"


def check_boundedness(cache):
    for name in BUILTIN:
        if name not in cache:
            return False, f"{name}: run failed"
    return True, "no DomainExit on any shipped scenario"


def check_snapshots():
    setup = build(load_scenario("desk-attitude"), T=40.0, debug_snapshots=True)
    trace = run_episode(setup.config.dmrac, setup.plant, setup.refmodel, setup.gains, setup.net,
                        **setup.run_kwargs()).trace
    bad = snapshot_violations(trace)
    versions = len(set(trace.net_version.tolist()))
    return not bad and versions > 1, f"{versions} network versions, {len(bad)} mismatched rows"


# ------------------------------------------------------------------ bounds


def check_bounds(rng):
    for _ in range(200):
        n = int(rng.integers(1, 5))
        P, Q = random_spd(rng, n), random_spd(rng, n)
        r = bnd.bound_report(P, Q, rng.uniform(0, 1), rng.uniform(0, 2), 0.1, 0.05, 8, 10)
        if r.uub_radius != bnd.uub_radius(P, Q, r.eps_bar):
            return False, "report radius not reproducible"
        if r.generalization_tolerance != bnd.generalization_tolerance(P, Q, r.e_norm):
            return False, "report tolerance not reproducible"
        eps = rng.uniform(0.01, 1)
        d1, d2 = sorted(rng.uniform(1e-3, 2, size=2))
        k, N = int(rng.integers(0, 16)), int(rng.integers(0, 1000))
        sc = bnd.sample_complexity
        if sc(eps, d1, k, N) < sc(eps, d2, k, N) or sc(eps, d1, k + 1, N) < sc(eps, d1, k, N) \
                or sc(eps, d1, k, N + 1) < sc(eps, d1, k, N):
            return False, "sample complexity not monotone"
    if bnd.sample_complexity(0.1, 0.05, 8, 10) != 5915:
        return False, "reference instance != 5915"
    return True, "200 random sweeps, reference instance 5915"


# --------------------------------------------------------------------- cli


def check_cli_contract():
    expected = "t,x0,x1,xrm0,xrm1,e_norm,u0,nu_ad0,delta_true0,delta_gen0,W_fro,buf_size,train_loss,train_rounds"
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "t.csv"
        cfg = Path(tmp) / "short.ini"
        cfg.write_text("[scenario]\nname = desk-attitude\n[dmrac]\nT = 1\n")
        buf = io.StringIO()
        from contextlib import redirect_stderr, redirect_stdout

        with redirect_stdout(buf), redirect_stderr(io.StringIO()):
            code = cli_main(["simulate", "--config", str(cfg), "--mode", "no-adaptation", "--out", str(out)])
        header = out.read_text().splitlines()[0] if out.exists() else ""
        if code != 0 or header != expected:
            return False, f"simulate exit {code}, header {header!r}"
        buf = io.StringIO()
        with redirect_stdout(buf), redirect_stderr(io.StringIO()):
            code = cli_main(["simulate", "--scenario", "desk-attitude", "--mode", "dmrac-frozen",
                             "--net", str(Path(tmp) / "missing.dmrn"), "--out", str(out)])
        if code != 3 or buf.getvalue():
            return False, f"missing network gave exit {code} with stdout {buf.getvalue()!r}"
    return True, "CSV header stable; exit 3 without success output"


# -------------------------------------------------------------------------


def run_suite(inject=None, seed=20240601):
    """Run every invariant check. Returns a list of CheckResult."""
    rng = make_rng(seed)
    gradient = _broken_gradient if inject == "gradient" else batch_gradient
    cache = {}

    def shipped():
        for name in BUILTIN:
            setup = build(load_scenario(name))
            mode = setup.config.dmrac.mode
            try:
                cache[name] = run_mode(setup, mode)[0]
            except Exception:
                pass
        cache["lyap"] = _structured_run()
        cache["lyap-disturbed"] = _structured_run(0.1)
        return True, "scenarios simulated"

    checks = [
        ("lyapunov-residual", lambda: check_lyapunov(rng)),
        ("eig-bounds-rayleigh", lambda: check_rayleigh(rng)),
        ("rk4-fourth-order", check_rk4_order),
        ("noise-reproducible", check_noise_reproducible),
        ("matched-pair", lambda: check_matched_pair(rng)),
        ("uncertainty-deterministic", lambda: check_uncertainty_deterministic(rng)),
        ("gradient-check", lambda: check_gradient(rng, gradient)),
        ("sgd-descent", lambda: check_descent(rng)),
        ("feature-norm-bound", lambda: check_feature_bound(rng)),
        ("network-deterministic", lambda: check_net_deterministic(rng)),
        ("projection-bound", lambda: check_projection(rng)),
        ("matched-cancellation", lambda: check_matched_cancellation(rng)),
        ("buffer", lambda: check_buffer(rng)),
        ("bound-calculators", lambda: check_bounds(rng)),
        ("shipped-scenarios", shipped),
        ("structured-lyapunov-decrease", lambda: check_structured_lyapunov(cache)),
        ("uub-entry", lambda: check_uub(cache)),
        ("boundedness", lambda: check_boundedness(cache)),
        ("determinism", lambda: check_determinism(cache)),
        ("mode-reductions", check_mode_reductions),
        ("feature-swap-safety", check_snapshots),
        ("cli-contract", check_cli_contract),
    ]
    results = []
    for name, fn in checks:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed invariant, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
