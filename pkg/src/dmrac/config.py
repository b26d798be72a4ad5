"""Scenario configuration: parsing, validation, serialization, built-ins.

Scenarios are flat sectioned key/value text::

    [scenario]
    name = desk-attitude        # start from a built-in, then override

    [plant]
    A = 0 1; 0 0                # matrix rows separated by ';'
    B = 0; 1

    [uncertainty]
    kind = polynomial-trig
    terms = 0.5 + 1*x0 - 0.5*x1 + 1*sin(2*x0) + 0.5*x0^3

Channels of a multi-input uncertainty are separated by '|'. Inline comments
start with '#'. Unknown sections or keys are rejected. :func:`serialize_config` writes every
resolved value with 17 significant digits, so parsing its output gives back
an identical configuration.
"""

import configparser
import re
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .adaptive_law import make_gains
from .closed_loop import MODES, DmracConfig
from .deepnet import init_network
from .errors import DmracError, ParseError, ValidationError
from .numerics import make_rng, sym_eig_bounds
from .plant import (
    PlantModel,
    ReferenceSignal,
    SignalComponent,
    Term,
    UncertaintySpec,
    basis_dim,
    basis_function,
    build_matched_pair,
    second_order_gains,
)


def _fmt(v):
    return format(float(v), ".17g")


# --------------------------------------------------------------------------
# value codecs


def parse_matrix(text, key):
    rows = [r.strip() for r in text.split(";")]
    try:
        data = [[float(v) for v in re.split(r"[,\s]+", r) if v] for r in rows if r]
    except ValueError:
        raise ValidationError(f"{key}: not a numeric matrix: {text!r}") from None
    if not data or len({len(r) for r in data}) != 1 or not data[0]:
        raise ValidationError(f"{key}: rows must be nonempty and of equal length")
    return np.array(data)


def format_matrix(M):
    M = np.atleast_2d(M)
    return "; ".join(" ".join(_fmt(v) for v in row) for row in M)


def parse_vector(text, key):
    return parse_matrix(text.replace(";", " "), key).reshape(-1)


_TRIG = re.compile(r"^(sin|cos)\(\s*([^*]+?)\s*\*\s*x(\d+)\s*(?:([+-])\s*([^)]+?))?\s*\)$")
_VAR = re.compile(r"^x(\d+)(?:\^(\d+))?$")


def _split_terms(expr):
    """Split on top-level '+'/'-' that are not exponent signs or inside parentheses."""
    parts, depth, cur = [], 0, ""
    i = 0
    s = expr.replace(" ", "")
    while i < len(s):
        c = s[i]
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        if c in "+-" and depth == 0 and cur and cur[-1] not in "eE*^+-":
            parts.append(cur)
            cur = c
        else:
            cur += c
        i += 1
    if cur:
        parts.append(cur)
    return parts


def parse_terms(expr, n, key):
    out = []
    for raw in _split_terms(expr):
        sign = -1.0 if raw.startswith("-") else 1.0
        body = raw.lstrip("+-")
        factors = body.split("*")
        try:
            coef = sign * float(factors[0])
            factors = factors[1:]
        except ValueError:
            coef = sign
        rest = "*".join(factors)
        m = _TRIG.match(rest)
        if m:
            kind, freq, idx, psign, phase = m.groups()
            idx = int(idx)
            if idx >= n:
                raise ValidationError(f"{key}: x{idx} out of range for a {n}-state plant")
            try:
                ph = float(phase) * (-1.0 if psign == "-" else 1.0) if phase else 0.0
                out.append(Term(kind, coef, index=idx, freq=float(freq), phase=ph))
            except ValueError:
                raise ValidationError(f"{key}: bad trig term {raw!r}") from None
            continue
        powers = [0] * n
        for f in factors:
            mv = _VAR.match(f)
            if not mv:
                raise ValidationError(f"{key}: cannot parse term {raw!r}")
            idx = int(mv.group(1))
            if idx >= n:
                raise ValidationError(f"{key}: x{idx} out of range for a {n}-state plant")
            powers[idx] += int(mv.group(2) or 1)
        out.append(Term("mono", coef, tuple(powers) if any(powers) else ()))
    if not out:
        raise ValidationError(f"{key}: empty expression")
    return tuple(out)


def format_terms(terms):
    out = ""
    for t in terms:
        if t.kind == "mono":
            factors = [f"x{i}" + (f"^{p}" if p > 1 else "") for i, p in enumerate(t.powers) if p]
            body = "*".join([_fmt(abs(t.coef))] + factors)
        else:
            body = f"{_fmt(abs(t.coef))}*{t.kind}({_fmt(t.freq)}*x{t.index} + {_fmt(t.phase)})"
        sign = "-" if np.signbit(t.coef) else "+"
        out = (f"-{body}" if sign == "-" else body) if not out else f"{out} {sign} {body}"
    return out


_CALL = re.compile(r"^\s*([a-z-]+)\s*\((.*)\)\s*$")


def parse_signal(text, key):
    comps = []
    for chunk in _split_calls(text):
        m = _CALL.match(chunk)
        if not m:
            raise ValidationError(f"{key}: expected kind(arg=value, ...), got {chunk!r}")
        kind, args = m.groups()
        kwargs = {}
        for a in filter(None, (s.strip() for s in args.split(","))):
            name, _, val = a.partition("=")
            name = name.strip()
            if name not in ("amplitude", "frequency", "phase"):
                raise ValidationError(f"{key}: unknown signal argument {name!r}")
            try:
                kwargs[name] = float(val)
            except ValueError:
                raise ValidationError(f"{key}: bad value for {name}: {val!r}") from None
        comps.append(SignalComponent(kind, **kwargs))
    return ReferenceSignal(tuple(comps))


def _split_calls(text):
    parts, depth, cur = [], 0, ""
    for c in text:
        depth += c == "("
        depth -= c == ")"
        if c == "+" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += c
    parts.append(cur)
    return [p for p in parts if p.strip()]


def format_signal(sig):
    return " + ".join(
        f"{c.kind}(amplitude={_fmt(c.amplitude)}, frequency={_fmt(c.frequency)}, phase={_fmt(c.phase)})"
        for c in sig.components
    )


# --------------------------------------------------------------------------


@dataclass(eq=False)
class ScenarioConfig:
    name: str
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    domain: np.ndarray
    uncertainty: UncertaintySpec
    reference: ReferenceSignal
    eval_reference: Optional[ReferenceSignal]
    K: np.ndarray
    K_r: np.ndarray
    Q: np.ndarray
    gamma: float
    layers: tuple
    net_seed: Optional[int]
    dmrac: DmracConfig
    basis: Optional[str]
    eps_bar: Optional[float]
    eps: float
    delta: float
    k_bits: int
    trace_path: Optional[str] = None
    summary_path: Optional[str] = None

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and serialize_config(self) == serialize_config(other)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


SCHEMA = {
    "scenario": {"name"},
    "plant": {"A", "B", "x0", "domain"},
    "uncertainty": {"kind", "terms", "basis", "w_star", "offset"},
    "reference": {"signal", "eval_signal"},
    "gains": {"K", "K_r", "omega_n", "zeta", "Q", "gamma"},
    "network": {"layers", "seed"},
    "dmrac": {f.name for f in fields(DmracConfig)} - {"parallel_trainer", "debug_snapshots", "gamma"},
    "baseline": {"basis"},
    "bounds": {"eps_bar", "eps", "delta", "k_bits"},
    "output": {"trace", "summary"},
}

BUILTIN = {
    "desk-attitude": """
[plant]
A = 0 1; 0 0
B = 0; 1
x0 = 0 0
domain = 5
[uncertainty]
kind = polynomial-trig
terms = 0.5 + 1*x0 - 0.5*x1 + 1*sin(2*x0) + 0.5*x0^3
[reference]
signal = sinusoid(amplitude=1, frequency=3.141592653589793) + sinusoid(amplitude=0.5, frequency=1.8849555921538759)
[gains]
omega_n = 4
zeta = 0.5
Q = 100 0; 0 100
gamma = 0.5
[network]
layers = 2 20 10
[dmrac]
dt = 0.05
T = 150
eta = 0.01
zeta_tol = 0.2
p_max = 250
minibatch = 10
train_every = 50
epochs_per_round = 10
noise_variance = 0.01
w_bound = 100
[baseline]
basis = affine
[bounds]
eps = 0.1
delta = 0.05
k_bits = 8
""",
    "structured": """
[plant]
A = 0 1; 0 0
B = 0; 1
x0 = 0 0
domain = 5
[uncertainty]
kind = linear-in-basis
basis = poly3
w_star = 0.5; -1; 0.6; 0.8; -0.5; 1
[reference]
signal = sinusoid(amplitude=1, frequency=1) + sinusoid(amplitude=0.5, frequency=2.3)
[gains]
omega_n = 4
zeta = 0.5
Q = 100 0; 0 100
gamma = 5
[network]
layers = 2 20 10
[dmrac]
mode = mrac-fixed-basis
dt = 0.005
T = 60
noise_variance = 0
minibatch = 10
[baseline]
basis = poly3
[bounds]
eps_bar = 0
eps = 0.1
delta = 0.05
k_bits = 8
""",
    "retention": """
[plant]
A = 0 1; 0 0
B = 0; 1
x0 = 0 0
domain = 5
[uncertainty]
kind = polynomial-trig
terms = 0.5 + 1*x0 - 0.5*x1 + 1*sin(2*x0) + 0.5*x0^3
[reference]
signal = sinusoid(amplitude=1, frequency=3.141592653589793) + sinusoid(amplitude=0.5, frequency=1.8849555921538759)
eval_signal = sinusoid(amplitude=1, frequency=3.141592653589793, phase=1) + sinusoid(amplitude=0.5, frequency=1.8849555921538759, phase=2)
[gains]
omega_n = 4
zeta = 0.5
Q = 100 0; 0 100
gamma = 0.5
[network]
layers = 2 20 10
[dmrac]
minibatch = 10
w_bound = 100
[baseline]
basis = affine
[bounds]
eps = 0.1
delta = 0.05
k_bits = 8
""",
}


def _read_sections(text, origin):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else 0
        raise ParseError(lineno, f"malformed line {exc.errors[0][1] if exc.errors else ''}") from None
    except configparser.Error as exc:
        raise ParseError(getattr(exc, "lineno", 0), str(exc).splitlines()[0]) from None
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ValidationError(f"unknown section [{sec}]")
        keys = dict(cp.items(sec))
        unknown = set(keys) - SCHEMA[sec]
        if unknown:
            raise ValidationError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")
        out[sec] = keys
    return out


def _merge(base, over):
    merged = {s: dict(v) for s, v in base.items()}
    for sec, keys in over.items():
        merged.setdefault(sec, {}).update(keys)
    # the K/K_r pair and the omega_n/zeta shorthand are alternatives
    g_over = over.get("gains", {})
    g = merged.get("gains", {})
    if {"K", "K_r"} & set(g_over):
        g.pop("omega_n", None)
        g.pop("zeta", None)
    elif {"omega_n", "zeta"} & set(g_over):
        g.pop("K", None)
        g.pop("K_r", None)
    return merged


def _num(sec, key, default=None, cast=float):
    if key not in sec:
        if default is None:
            raise ValidationError(f"missing required key {key!r}")
        return default
    try:
        return cast(sec[key])
    except ValueError:
        raise ValidationError(f"{key}: expected a number, got {sec[key]!r}") from None


def _train_every(text):
    t = text.strip().lower()
    if t in ("inf", "never", "none"):
        return None
    return int(t)


def parse_config(text, origin="<config>"):
    """Parse scenario text into a validated :class:`ScenarioConfig`."""
    user = _read_sections(text, origin)
    name = user.get("scenario", {}).get("name", "custom")
    if name in BUILTIN:
        sections = _merge(_read_sections(BUILTIN[name], name), user)
    elif "scenario" in user and "name" in user["scenario"] and not set(user) - {"scenario"}:
        raise ValidationError(f"unknown built-in scenario {name!r}; known: {sorted(BUILTIN)}")
    else:
        sections = user
    try:
        return _resolve(name, sections)
    except DmracError as exc:
        if isinstance(exc, (ValidationError, ParseError)):
            raise
        raise ValidationError(str(exc)) from exc


def _resolve(name, s):
    plant_s = s.get("plant", {})
    if "A" not in plant_s or "B" not in plant_s:
        raise ValidationError("[plant] needs A and B")
    A = parse_matrix(plant_s["A"], "A")
    B = parse_matrix(plant_s["B"], "B")
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n:
        raise ValidationError(f"A {A.shape} / B {B.shape} incompatible")
    m = B.shape[1]
    x0 = parse_vector(plant_s.get("x0", " ".join(["0"] * n)), "x0")
    domain = parse_vector(plant_s.get("domain", "10"), "domain")
    if x0.shape != (n,):
        raise ValidationError(f"x0 must have {n} entries")
    if domain.shape not in ((1,), (n,)) or np.any(domain <= 0):
        raise ValidationError("domain must be one positive half-width or one per state")

    u = s.get("uncertainty", {"kind": "zero"})
    kind = u.get("kind", "zero")
    offset = parse_vector(u["offset"], "offset") if "offset" in u else None
    if kind == "zero":
        unc = UncertaintySpec("zero", m=m, offset=offset)
    elif kind == "linear-in-basis":
        if "basis" not in u or "w_star" not in u:
            raise ValidationError("linear-in-basis needs basis and w_star")
        w = parse_matrix(u["w_star"], "w_star")
        if w.shape[0] == 1 and w.shape[1] > 1:
            w = w.T
        if w.shape[0] != basis_dim(u["basis"], n):
            raise ValidationError(f"w_star has {w.shape[0]} rows, basis {u['basis']} has {basis_dim(u['basis'], n)}")
        unc = UncertaintySpec("linear-in-basis", w_star=w, basis=u["basis"], offset=offset)
    elif kind == "polynomial-trig":
        if "terms" not in u:
            raise ValidationError("polynomial-trig needs terms")
        chans = tuple(parse_terms(ch, n, "terms") for ch in u["terms"].split("|"))
        unc = UncertaintySpec("polynomial-trig", terms=chans, offset=offset)
    else:
        raise ValidationError(f"unknown uncertainty kind {kind!r}")
    if unc.m != m:
        raise ValidationError(f"uncertainty has {unc.m} outputs but B has {m} columns")

    r = s.get("reference", {})
    if "signal" not in r:
        raise ValidationError("[reference] needs signal")
    ref_sig = parse_signal(r["signal"], "signal")
    eval_sig = parse_signal(r["eval_signal"], "eval_signal") if "eval_signal" in r else None

    g = s.get("gains", {})
    if "K" in g or "K_r" in g:
        if "K" not in g or "K_r" not in g:
            raise ValidationError("give both K and K_r")
        K = parse_matrix(g["K"], "K")
        K_r = parse_matrix(g["K_r"], "K_r")
    elif "omega_n" in g and "zeta" in g:
        K, K_r = second_order_gains(A, B, _num(g, "omega_n"), _num(g, "zeta"))
    else:
        raise ValidationError("[gains] needs K and K_r, or omega_n and zeta")
    if K_r.ndim == 2 and K_r.shape[0] != m and K_r.shape[1] == m:
        K_r = K_r.T
    ref_model = build_matched_pair(A, B, K, K_r)
    if ref_model.r_dim != ref_sig.dim or (eval_sig is not None and eval_sig.dim != ref_sig.dim):
        raise ValidationError(f"reference signal dimension must be {ref_model.r_dim}")
    Q = parse_matrix(g["Q"], "Q") if "Q" in g else np.eye(n)
    if Q.shape != (n, n) or np.max(np.abs(Q - Q.T)) > 0 or sym_eig_bounds(Q)[0] <= 0:
        raise ValidationError("Q must be symmetric positive definite")
    gamma = _num(g, "gamma", 0.5)
    if not gamma > 0:
        raise ValidationError("gamma must be positive")

    net_s = s.get("network", {})
    layers = tuple(int(v) for v in parse_vector(net_s.get("layers", f"{n} 20 10"), "layers"))
    if layers[0] != n or min(layers) < 1:
        raise ValidationError(f"network layers must start with the state size {n}")
    net_seed = _num(net_s, "seed", None, int) if "seed" in net_s else None

    d = s.get("dmrac", {})
    kwargs = {}
    for f in fields(DmracConfig):
        if f.name not in d:
            continue
        raw = d[f.name]
        if f.name == "mode":
            kwargs["mode"] = raw.strip()
        elif f.name == "train_every":
            kwargs["train_every"] = _train_every(raw)
        elif f.name in ("p_max", "minibatch", "epochs_per_round", "seed"):
            kwargs[f.name] = _num(d, f.name, cast=int)
        else:
            kwargs[f.name] = _num(d, f.name)
    if "zeta_tol" in kwargs and not kwargs["zeta_tol"] > 0:
        raise ValidationError("ζ_tol must be positive (zeta_tol)")
    if "mode" in kwargs and kwargs["mode"] not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if "w_bound" not in kwargs:
        kwargs["w_bound"] = 10.0 * float(np.linalg.norm(unc.w_star)) if unc.structured else 100.0
    cfg = DmracConfig(gamma=gamma, **kwargs)

    basis = s.get("baseline", {}).get("basis")
    if basis is not None:
        basis_dim(basis, n)

    b = s.get("bounds", {})
    eps_bar = _num(b, "eps_bar", None) if "eps_bar" in b else None
    eps = _num(b, "eps", 0.1)
    delta = _num(b, "delta", 0.05)
    k_bits = _num(b, "k_bits", 8, int)
    if eps_bar is not None and eps_bar < 0:
        raise ValidationError("eps_bar must be >= 0")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if not 0 < delta <= 2:
        raise ValidationError("delta must lie in (0, 2]")

    o = s.get("output", {})
    return ScenarioConfig(
        name=name, A=A, B=B, x0=x0, domain=domain, uncertainty=unc, reference=ref_sig,
        eval_reference=eval_sig, K=np.atleast_2d(K), K_r=np.atleast_2d(K_r), Q=Q, gamma=gamma,
        layers=layers, net_seed=net_seed, dmrac=cfg, basis=basis, eps_bar=eps_bar, eps=eps,
        delta=delta, k_bits=k_bits, trace_path=o.get("trace"), summary_path=o.get("summary"),
    )


def serialize_config(c):
    """Fully resolved text form; ``parse_config`` of it gives an equal config."""
    lines = ["[scenario]", f"name = {c.name}", "", "[plant]",
             f"A = {format_matrix(c.A)}", f"B = {format_matrix(c.B)}",
             f"x0 = {' '.join(_fmt(v) for v in c.x0)}", f"domain = {' '.join(_fmt(v) for v in c.domain)}",
             "", "[uncertainty]", f"kind = {c.uncertainty.kind}"]
    u = c.uncertainty
    if u.kind == "linear-in-basis":
        lines += [f"basis = {u.basis}", f"w_star = {format_matrix(u.w_star)}"]
    elif u.kind == "polynomial-trig":
        lines.append("terms = " + " | ".join(format_terms(ch) for ch in u.terms))
    if u.offset is not None:
        lines.append(f"offset = {' '.join(_fmt(v) for v in u.offset)}")
    lines += ["", "[reference]", f"signal = {format_signal(c.reference)}"]
    if c.eval_reference is not None:
        lines.append(f"eval_signal = {format_signal(c.eval_reference)}")
    lines += ["", "[gains]", f"K = {format_matrix(c.K)}", f"K_r = {format_matrix(c.K_r)}",
              f"Q = {format_matrix(c.Q)}", f"gamma = {_fmt(c.gamma)}",
              "", "[network]", f"layers = {' '.join(str(v) for v in c.layers)}"]
    if c.net_seed is not None:
        lines.append(f"seed = {c.net_seed}")
    lines += ["", "[dmrac]"]
    for f in fields(DmracConfig):
        if f.name not in SCHEMA["dmrac"]:
            continue
        v = getattr(c.dmrac, f.name)
        if f.name == "train_every":
            lines.append(f"train_every = {'inf' if v is None else v}")
        elif isinstance(v, float):
            lines.append(f"{f.name} = {_fmt(v)}")
        else:
            lines.append(f"{f.name} = {v}")
    if c.basis is not None:
        lines += ["", "[baseline]", f"basis = {c.basis}"]
    lines += ["", "[bounds]"]
    if c.eps_bar is not None:
        lines.append(f"eps_bar = {_fmt(c.eps_bar)}")
    lines += [f"eps = {_fmt(c.eps)}", f"delta = {_fmt(c.delta)}", f"k_bits = {c.k_bits}"]
    if c.trace_path or c.summary_path:
        lines += ["", "[output]"]
        if c.trace_path:
            lines.append(f"trace = {c.trace_path}")
        if c.summary_path:
            lines.append(f"summary = {c.summary_path}")
    return "\n".join(lines) + "\n"


def load_scenario(name_or_path):
    """Built-in name or path to a config file."""
    if name_or_path in BUILTIN:
        return parse_config(f"[scenario]\nname = {name_or_path}\n", origin=name_or_path)
    with open(name_or_path) as fh:
        return parse_config(fh.read(), origin=name_or_path)


# --------------------------------------------------------------------------


@dataclass
class Setup:
    """Everything a run needs, built from a ScenarioConfig."""

    config: ScenarioConfig
    plant: PlantModel
    refmodel: object
    gains: object
    net: object
    basis: object = None
    basis_gains: object = None  # Gamma sized for the fixed basis
    w_star: Optional[np.ndarray] = None

    def run_kwargs(self, task="train"):
        if task == "eval":
            if self.config.eval_reference is None:
                raise ValidationError(f"scenario {self.config.name!r} has no eval reference")
            reference = self.config.eval_reference
        else:
            reference = self.config.reference
        return {"reference": reference, "x0": self.config.x0, "domain": self.config.domain}


def build(c, **overrides):
    """Instantiate plant, reference model, gains and initial network.

    ``overrides`` are applied to the DmracConfig (e.g. ``seed=``, ``mode=``).
    """
    if overrides:
        c = replace(c, dmrac=replace(c.dmrac, **overrides))
    plant = PlantModel(c.A, c.B, c.uncertainty)
    refmodel = build_matched_pair(c.A, c.B, c.K, c.K_r)
    k = c.layers[-1]
    gains = make_gains(refmodel.A_rm, c.K, c.K_r, c.gamma * np.eye(k), c.Q)
    seed = c.dmrac.seed if c.net_seed is None else c.net_seed
    net = init_network(c.layers, c.m, make_rng(seed))
    basis = None
    basis_gains = None
    if c.basis is not None:
        basis = basis_function(c.basis)
        basis_gains = make_gains(refmodel.A_rm, c.K, c.K_r, c.gamma * np.eye(basis_dim(c.basis, c.n)), c.Q)
    w_star = c.uncertainty.w_star if c.uncertainty.structured else None
    return Setup(c, plant, refmodel, gains, net, basis, basis_gains, w_star)
