"""Dual time-scale closed loop.

Every control step the plant, the reference model and the outer weights W
are advanced together by one RK4 step, with the control law evaluated at
each stage against the current feature snapshot. The new sample is then
offered to the replay buffer, and every ``train_every`` steps the inner
layers are retrained on mini-batches and the controller's feature snapshot
is swapped. W keeps its value across swaps.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import deepnet
from .adaptive_law import clamp, total_control, weight_rate
from .deepnet import SgdConfig, swap_features, with_output
from .errors import DomainExit, EmptyTrace, ValidationError, ZeroFeature
from .numerics import gaussian_vector, make_rng, rk4_step
from .plant import eval_uncertainty, plant_derivative, reference_derivative
from .replay_buffer import BufferEntry, ReplayBuffer, sample_minibatch, try_insert

log = logging.getLogger(__name__)

MODES = ("dmrac-adaptive", "dmrac-frozen", "mrac-fixed-basis", "no-adaptation")
DOMAIN_INFLATION = 10.0


@dataclass(frozen=True)
class DmracConfig:
    dt: float = 0.05
    T: float = 150.0
    gamma: float = 0.5
    eta: float = 0.01
    zeta_tol: float = 0.2
    p_max: int = 250
    minibatch: int = 20
    train_every: Optional[int] = 50  # None: never retrain features
    epochs_per_round: int = 10
    noise_variance: float = 0.01
    mode: str = "dmrac-adaptive"
    seed: int = 0
    w_bound: float = 100.0
    eps_proj: float = 0.1
    parallel_trainer: bool = False
    debug_snapshots: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if not self.T >= self.dt:
            raise ValidationError("T must be at least dt")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if not self.zeta_tol > 0:
            raise ValidationError("zeta_tol must be positive")
        if self.p_max < 1 or self.minibatch < 1 or self.epochs_per_round < 1:
            raise ValidationError("p_max, minibatch and epochs_per_round must be positive")
        if self.train_every is not None and self.train_every < 1:
            raise ValidationError("train_every must be positive (or None)")
        if self.noise_variance < 0:
            raise ValidationError("noise variance must be >= 0")
        if not self.w_bound > 0 or not self.eps_proj > 0:
            raise ValidationError("w_bound and eps_proj must be positive")

    @property
    def n_steps(self):
        return int(math.floor(self.T / self.dt + 1e-9))


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    x_rm: np.ndarray
    e: np.ndarray
    u: np.ndarray
    nu_ad: np.ndarray
    delta_true: np.ndarray
    delta_gen: np.ndarray
    w_fro: np.ndarray
    buf_size: np.ndarray
    train_loss: np.ndarray
    train_rounds: np.ndarray
    net_version: np.ndarray
    W: Optional[np.ndarray] = None  # (N+1, k, m) outer-weight history
    admitted: int = 0
    rejected: int = 0
    zero_features: int = 0
    snapshots: dict = field(default_factory=dict)  # version -> network (debug mode)

    def __len__(self):
        return self.t.shape[0]

    @property
    def e_norm(self):
        return np.linalg.norm(self.e, axis=1)

    def columns(self):
        n, m = self.x.shape[1], self.u.shape[1]
        return (
            ["t"]
            + [f"x{i}" for i in range(n)]
            + [f"xrm{i}" for i in range(n)]
            + ["e_norm"]
            + [f"u{i}" for i in range(m)]
            + [f"nu_ad{i}" for i in range(m)]
            + [f"delta_true{i}" for i in range(m)]
            + [f"delta_gen{i}" for i in range(m)]
            + ["W_fro", "buf_size", "train_loss", "train_rounds"]
        )

    def rows(self):
        table = np.column_stack(
            [self.t, self.x, self.x_rm, self.e_norm, self.u, self.nu_ad, self.delta_true,
             self.delta_gen, self.w_fro, self.buf_size, self.train_loss, self.train_rounds]
        )
        return table

    def write_csv(self, path):
        cols = self.columns()
        int_cols = {cols.index("buf_size"), cols.index("train_rounds")}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.rows():
                w.writerow([str(int(v)) if j in int_cols else format(float(v), ".17g") for j, v in enumerate(row)])


class EpisodeResult(NamedTuple):
    trace: SimTrace
    net: Optional[deepnet.DeepFeatureNetwork]
    buffer: Optional[ReplayBuffer]


@dataclass(frozen=True)
class EpisodeSummary:
    rms_e: float
    rms_e_final: float  # last 25% of the rows
    max_e: float
    uub_radius: float
    fraction_inside: float
    final_buffer_size: int
    admitted: int
    rejected: int

    def to_dict(self):
        return asdict(self)


def summarize(trace, uub_radius=0.0):
    if len(trace) == 0:
        raise EmptyTrace("cannot summarize an empty trace")
    en = trace.e_norm
    tail = en[int(math.floor(0.75 * len(en))):]
    return EpisodeSummary(
        rms_e=float(np.sqrt(np.mean(en * en))),
        rms_e_final=float(np.sqrt(np.mean(tail * tail))),
        max_e=float(np.max(en)),
        uub_radius=float(uub_radius),
        fraction_inside=float(np.mean(en <= uub_radius)),
        final_buffer_size=int(trace.buf_size[-1]),
        admitted=trace.admitted,
        rejected=trace.rejected,
    )


# --------------------------------------------------------------------------


def _streams(config, rng):
    rng = make_rng(config.seed) if rng is None else rng
    noise_rng, sample_rng = rng.spawn(2)
    return noise_rng, sample_rng


def _train_round(net, W, buffer, config, sample_rng, gradient=deepnet.batch_gradient):
    """Fit the whole network to the buffer, starting from theta_out = W."""
    start = with_output(net, W)
    M = config.minibatch
    sgd = SgdConfig(config.eta, config.epochs_per_round, M)
    return deepnet.train(
        start,
        lambda: sample_minibatch(buffer, M, sample_rng),
        sgd,
        batches_per_epoch=max(1, len(buffer) // M),
        gradient=gradient,
    )


def _simulate(config, plant, refmodel, gains, reference, features, adapt, nu_fn=None,
              net=None, x0=None, domain=None, rng=None, learn=False):
    """Shared loop for all modes.

    features: callable x -> Phi(x) used by the adaptive term (adapt=True).
    nu_fn: callable x -> nu_ad for non-adapting modes (None: nu_ad = 0).
    learn: buffer admission and feature retraining (requires ``net``).
    """
    n, m = plant.n, plant.m
    if refmodel.A_rm.shape[0] != n or reference.dim != refmodel.r_dim:
        raise ValidationError("plant, reference model and reference signal dimensions disagree")
    N = config.n_steps
    dt = config.dt
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    box = None if domain is None else DOMAIN_INFLATION * np.broadcast_to(np.asarray(domain, dtype=float), (n,))
    noise_rng, sample_rng = _streams(config, rng)
    B = plant.B
    bound = config.w_bound
    eps = config.eps_proj

    if adapt:
        k = features(x0).shape[0]
        W = np.zeros((k, m))
    else:
        k = 0
        W = np.zeros((0, m))

    buffer = ReplayBuffer(config.p_max, config.zeta_tol, n, k, m) if learn else None

    tr = SimTrace(
        t=dt * np.arange(N + 1),
        x=np.empty((N + 1, n)),
        x_rm=np.empty((N + 1, n)),
        e=np.empty((N + 1, n)),
        u=np.empty((N + 1, m)),
        nu_ad=np.empty((N + 1, m)),
        delta_true=np.empty((N + 1, m)),
        delta_gen=np.empty((N + 1, m)),
        w_fro=np.empty(N + 1),
        buf_size=np.zeros(N + 1, dtype=int),
        train_loss=np.full(N + 1, np.nan),
        train_rounds=np.zeros(N + 1, dtype=int),
        net_version=np.zeros(N + 1, dtype=int),
        W=np.empty((N + 1, k, m)) if adapt else None,
    )

    version = 0
    if learn and config.debug_snapshots:
        tr.snapshots[version] = net
    rounds = 0
    last_loss = np.nan
    pool = ThreadPoolExecutor(max_workers=1) if (learn and config.parallel_trainer) else None
    pending = None

    def nu_of(x, W):
        if adapt:
            phi = features(x)
            return W.T @ phi
        if nu_fn is None:
            return np.zeros(m)
        return nu_fn(x)

    def rhs(t, z):
        x = z[:n]
        xr = z[n : 2 * n]
        r = reference(t)
        Wt = z[2 * n :].reshape(k, m) if adapt else None
        if adapt:
            phi = features(x)
            nu = Wt.T @ phi
        else:
            nu = nu_of(x, None)
        u = total_control(gains, x, r, nu)
        dx = plant_derivative(plant, x, u)
        dxr = reference_derivative(refmodel, xr, r)
        if not adapt:
            return np.concatenate([dx, dxr])
        dW = weight_rate(Wt, phi, xr - x, gains, B, bound, eps)
        return np.concatenate([dx, dxr, dW.ravel()])

    x = x0.copy()
    xr = x0.copy()
    try:
        for step in range(N + 1):
            t = step * dt
            r = reference(t)
            nu = nu_of(x, W)
            tr.x[step] = x
            tr.x_rm[step] = xr
            tr.e[step] = xr - x
            tr.u[step] = total_control(gains, x, r, nu)
            tr.nu_ad[step] = nu
            tr.delta_true[step] = eval_uncertainty(plant.delta, x)
            tr.delta_gen[step] = nu
            tr.w_fro[step] = float(np.linalg.norm(W))
            tr.buf_size[step] = len(buffer) if buffer is not None else 0
            tr.train_loss[step] = last_loss
            tr.train_rounds[step] = rounds
            tr.net_version[step] = version
            if adapt:
                tr.W[step] = W
            if step == N:
                break

            z = np.concatenate([x, xr, W.ravel()]) if adapt else np.concatenate([x, xr])
            z = rk4_step(rhs, z, t, dt)
            x = z[:n] + np.sqrt(dt) * gaussian_vector(noise_rng, config.noise_variance, n)
            xr = z[n : 2 * n]
            if adapt:
                W = clamp(z[2 * n :].reshape(k, m), bound, eps)
            if not np.all(np.isfinite(x)) or (box is not None and np.any(np.abs(x) > box)):
                raise DomainExit(step + 1, t + dt, x)

            if not learn:
                continue

            if pending is not None and pending.done():
                net, version, last_loss, rounds = _adopt(net, pending.result(), version, rounds, tr, config)
                features = net.forward_features
                pending = None

            phi = features(x)
            try:
                try_insert(buffer, BufferEntry(x.copy(), phi, W.T @ phi))
            except ZeroFeature:
                tr.zero_features += 1

            due = config.train_every is not None and (step + 1) % config.train_every == 0
            if due and len(buffer) >= config.minibatch:
                if pool is None:
                    result = _train_round(net, W, buffer, config, sample_rng)
                    net, version, last_loss, rounds = _adopt(net, result, version, rounds, tr, config)
                    features = net.forward_features
                elif pending is None:
                    pending = pool.submit(_train_round, net, W.copy(), buffer.copy(), config, sample_rng)
    finally:
        if pool is not None:
            if pending is not None:
                net, version, last_loss, rounds = _adopt(net, pending.result(), version, rounds, tr, config)
            pool.shutdown(wait=True)

    if buffer is not None:
        tr.admitted = buffer.admitted
        tr.rejected = buffer.rejected
    return EpisodeResult(tr, net, buffer), W


def _adopt(net, result, version, rounds, tr, config):
    trained, loss = result
    new_net = deepnet.DeepFeatureNetwork(swap_features(net, trained.inner).inner, trained.output)
    version += 1
    if config.debug_snapshots:
        tr.snapshots[version] = new_net
    log.debug("feature swap -> version %d (loss %.4g)", version, loss)
    return new_net, version, loss, rounds + 1


def run_episode(config, plant, refmodel, gains, net, rng=None, *, reference, x0=None, domain=None):
    """Full DMRAC loop. Returns (trace, trained network, buffer).

    The returned network carries the retrained inner layers and the output
    layer of the last training round (W itself if no round ran).
    """
    if config.mode != "dmrac-adaptive":
        raise ValidationError(f"run_episode needs mode dmrac-adaptive, got {config.mode}")
    if net.n != plant.n or net.m != plant.m:
        raise ValidationError("network input/output sizes do not match the plant")
    result, W = _simulate(config, plant, refmodel, gains, reference, net.forward_features, adapt=True,
                          net=net, x0=x0, domain=domain, rng=rng, learn=True)
    out_net = result.net if result.trace.train_rounds[-1] > 0 else with_output(result.net, W)
    return EpisodeResult(result.trace, out_net, result.buffer)


def run_frozen(config, plant, refmodel, gains, net, rng=None, *, reference, x0=None, domain=None):
    """Trained network as a fixed feed-forward term: nu_ad = theta_out^T Phi(x)."""
    if config.mode != "dmrac-frozen":
        raise ValidationError(f"run_frozen needs mode dmrac-frozen, got {config.mode}")
    result, _ = _simulate(config, plant, refmodel, gains, reference, None, adapt=False,
                          nu_fn=net.forward_output, x0=x0, domain=domain, rng=rng)
    return result.trace


def run_baseline(config, plant, refmodel, gains, basis=None, rng=None, *, reference, x0=None, domain=None):
    """Classic MRAC over a fixed basis, or no adaptive term at all."""
    if config.mode == "mrac-fixed-basis":
        if basis is None:
            raise ValidationError("mrac-fixed-basis needs a basis")
        result, _ = _simulate(config, plant, refmodel, gains, reference, basis, adapt=True,
                              x0=x0, domain=domain, rng=rng)
    elif config.mode == "no-adaptation":
        result, _ = _simulate(config, plant, refmodel, gains, reference, None, adapt=False,
                              x0=x0, domain=domain, rng=rng)
    else:
        raise ValidationError(f"run_baseline needs a baseline mode, got {config.mode}")
    return result.trace


def snapshot_violations(trace):
    """Rows whose nu_ad does not reproduce from the logged network snapshot.

    Requires a trace recorded with ``debug_snapshots``. Returns the list of
    offending row indices (empty when every control value came from one
    complete, published network).
    """
    bad = []
    for i in range(len(trace)):
        net = trace.snapshots.get(int(trace.net_version[i]))
        if net is None:
            bad.append(i)
            continue
        nu = trace.W[i].T @ net.forward_features(trace.x[i])
        if not np.array_equal(nu, trace.nu_ad[i]):
            bad.append(i)
    return bad
