"""INI run configuration: typed access with defaults and named errors.

Sections are ``domain``, ``noise``, ``model``, ``stepper`` and ``estimator``.
Spatial coefficients may be expressions in ``x`` (and ``y`` in 2-D) and
diffusion amplitudes expressions in ``u``, built from the names in
:data:`EXPR_NAMES`.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

import numpy as np

from .domain import build_domain
from .engine import ModelError, StepperConfig
from .noise import ChannelRule

SECTIONS = ("domain", "noise", "model", "stepper", "estimator")

EXPR_NAMES = {
    "pi": np.pi,
    "e": np.e,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "where": np.where,
}

#: every key with its default; ``None`` means model dependent or required
DEFAULTS = {
    "domain": {"kind": "torus", "dim": "1", "extent": "2*pi", "points": "64"},
    "noise": {
        "rule": "white",
        "eps": "0",
        "alpha": "1",
        "shift": "1",
        "diffusion": "1",
        "coefficients": "",
        "independent": "true",
    },
    "model": {
        "name": None,
        "sigma": "u",
        "init": "0.5",
        # logistic
        "d": "1",
        "K": "1",
        "r": "1",
        "E": "0",
        # linear
        "diffusion": "1",
        "shift": "0",
        "growth": "0",
        # sir
        "lam": "1",
        "eta": "0.5",
        "delta": "0.1",
        "sigma_rec": "0.1",
        "beta": "1",
        "c1": "0.5",
        "c2": "0.5",
        "c3": "0",
        "d1": "1",
        "d2": "1",
        "alpha1": "0",
        "alpha2": "0",
        # lv and delay
        "species": "2",
        "rates": "1, 1",
        "interaction": "1, 0.3; 0.3, 1",
        "horizon": "0.5",
        "g": "0.3",
        "covariance": "",
    },
    "stepper": {"dt": "0.001", "scheme": "exponential-euler", "taming": "", "positivity": "clip"},
    "estimator": {
        "T": "10",
        "burn_in": "0",
        "paths": "8",
        "replicas": "8",
        "delta": "0.05",
        "floor": "1e-8",
        "tol": "1e-8",
        "species": "1",
        "band": "",
        "beta": "-0.3",
        "trace_points": "500",
        "block": "8",
    },
}


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""

    def __init__(self, key, message):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def parse_expression(text, key, variables):
    """Compile a restricted arithmetic expression over ``variables``."""
    try:
        code = compile(text, key, "eval")
    except SyntaxError as exc:
        raise ConfigError(key, f"cannot parse expression {text!r}") from exc
    allowed = set(EXPR_NAMES) | set(variables)
    bad = [n for n in code.co_names if n not in allowed]
    if bad:
        raise ConfigError(key, f"unknown names {bad} in {text!r}")

    def fn(*args):
        scope = dict(EXPR_NAMES)
        scope.update(zip(variables, args))
        return eval(code, {"__builtins__": {}}, scope)

    return fn


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    text: str

    @classmethod
    def from_text(cls, text):
        p = configparser.ConfigParser(interpolation=None)
        p.optionxform = str
        try:
            p.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(getattr(exc, "option", None) or "<file>", str(exc).splitlines()[0]) from exc
        for sec in p.sections():
            if sec not in SECTIONS:
                raise ConfigError(sec, f"unknown section; expected one of {SECTIONS}")
            for key in p[sec]:
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"{sec}.{key}", "unknown key")
        return cls(p, text)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from exc
        return cls.from_text(text)

    def digest(self):
        """Hash of the canonical (sorted, default-filled) configuration."""
        lines = []
        for sec in SECTIONS:
            for key in sorted(DEFAULTS[sec]):
                lines.append(f"{sec}.{key}={self.raw(sec, key)}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def raw(self, sec, key):
        if self.parser.has_option(sec, key):
            return self.parser.get(sec, key).strip()
        default = DEFAULTS[sec][key]
        return "" if default is None else default

    def has(self, sec, key):
        return self.parser.has_option(sec, key)

    def str(self, sec, key, choices=None):
        val = self.raw(sec, key)
        if DEFAULTS[sec][key] is None and not val:
            raise ConfigError(f"{sec}.{key}", "required")
        if choices is not None and val not in choices:
            raise ConfigError(f"{sec}.{key}", f"{val!r} not in {tuple(choices)}")
        return val

    def float(self, sec, key, positive=False, nonneg=False):
        val = self.raw(sec, key)
        try:
            out = float(parse_expression(val, f"{sec}.{key}", ())())
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{sec}.{key}", f"expected a number, got {val!r}") from exc
        if not np.isfinite(out):
            raise ConfigError(f"{sec}.{key}", "must be finite")
        if positive and not out > 0:
            raise ConfigError(f"{sec}.{key}", "must be positive")
        if nonneg and out < 0:
            raise ConfigError(f"{sec}.{key}", "must be nonnegative")
        return out

    def int(self, sec, key, minimum=None):
        val = self.raw(sec, key)
        try:
            out = int(val)
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key}", f"expected an integer, got {val!r}") from exc
        if minimum is not None and out < minimum:
            raise ConfigError(f"{sec}.{key}", f"must be >= {minimum}")
        return out

    def bool(self, sec, key):
        val = self.raw(sec, key).lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{sec}.{key}", f"expected a boolean, got {val!r}")

    def floats(self, sec, key, sep=","):
        val = self.raw(sec, key)
        if not val:
            return []
        try:
            return [float(parse_expression(v.strip(), f"{sec}.{key}", ())()) for v in val.split(sep)]
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{sec}.{key}", f"expected numbers separated by {sep!r}") from exc

    def matrix(self, sec, key):
        val = self.raw(sec, key)
        if not val:
            return None
        rows = []
        for row in val.split(";"):
            try:
                rows.append([float(v) for v in row.split(",")])
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}", "expected rows 'a, b; c, d'") from exc
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{sec}.{key}", "rows have different lengths")
        return rows

    def spatial(self, sec, key, dim):
        """Coefficient as a callable of the coordinates."""
        names = ("x",) if dim == 1 else ("x", "y")
        return parse_expression(self.raw(sec, key), f"{sec}.{key}", names)

    # ----------------------------------------------------------------- builders

    def domain(self):
        kind = self.str("domain", "kind", ("torus", "neumann"))
        dim = self.int("domain", "dim")
        if dim not in (1, 2):
            raise ConfigError("domain.dim", "must be 1 or 2")
        extent = self.float("domain", "extent", positive=True)
        points = self.int("domain", "points")
        if points < 8 or points & (points - 1):
            raise ConfigError("domain.points", "must be a power of two >= 8")
        return build_domain(kind, dim, extent, points)

    def noise_rules(self, m):
        rules = [r.strip() for r in self.raw("noise", "rule").split(",")]
        if len(rules) == 1:
            rules = rules * m
        if len(rules) != m:
            raise ConfigError("noise.rule", f"need 1 or {m} rules")
        out = []
        for r in rules:
            try:
                out.append(
                    ChannelRule(
                        r,
                        alpha=self.float("noise", "alpha"),
                        shift=self.float("noise", "shift"),
                        diffusion=self.float("noise", "diffusion", positive=True),
                        coefficients=tuple(self.floats("noise", "coefficients")),
                    )
                )
            except ValueError as exc:
                raise ConfigError("noise.rule", str(exc)) from exc
        return out

    def noise_strengths(self, m):
        eps = self.floats("noise", "eps")
        if len(eps) == 1:
            eps = eps * m
        if len(eps) != m or any(e < 0 for e in eps):
            raise ConfigError("noise.eps", f"need 1 or {m} nonnegative strengths")
        return eps

    def stepper(self, default_taming=None):
        taming = self.raw("stepper", "taming")
        try:
            return StepperConfig(
                dt=self.float("stepper", "dt", positive=True),
                scheme=self.str("stepper", "scheme", ("exponential-euler", "semi-implicit")),
                taming=None if not taming else self.float("stepper", "taming", nonneg=True),
                positivity=self.str("stepper", "positivity", ("clip", "reject")),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("stepper", str(exc)) from exc


MODEL_NAMES = ("kpp", "logistic", "linear", "sir", "lv", "delay_logistic", "delay_lv")


def sigma_function(cfg: RunConfig):
    return parse_expression(cfg.raw("model", "sigma"), "model.sigma", ("u",))


def build_model(cfg: RunConfig, tracked=None):
    """``(ModelSpec, extra)`` for the configured SPDE model."""
    from . import models as M

    name = cfg.str("model", "name", MODEL_NAMES)
    if name.startswith("delay"):
        raise ConfigError("model.name", f"{name} is a delay model; use the 'delay' subcommand")
    dom = cfg.domain()
    sig = sigma_function(cfg)
    custom_sigma = cfg.raw("model", "sigma") != "u"
    slope = None if custom_sigma else 1.0

    def sigma(x):
        return np.broadcast_to(np.asarray(sig(x), float), np.shape(x))

    if name in ("kpp", "logistic", "linear"):
        rules = cfg.noise_rules(1)
        eps = cfg.noise_strengths(1)[0]
    if name == "kpp":
        p = M.KppParams(eps=eps, sigma=sigma, sigma_slope=slope, noise=rules[0])
        return M.build_kpp(p, dom)
    if name == "logistic":
        p = M.LogisticParams(
            d=cfg.float("model", "d", positive=True),
            K=cfg.spatial("model", "K", dom.dim),
            r=cfg.spatial("model", "r", dom.dim),
            E=cfg.spatial("model", "E", dom.dim),
            eps=eps,
            sigma=sigma,
            sigma_slope=slope,
            noise=rules[0],
        )
        return M.build_logistic(p, dom)
    if name == "linear":
        model = M.build_linear(
            dom,
            diffusion=cfg.float("model", "diffusion", positive=True),
            shift=cfg.float("model", "shift"),
            growth=cfg.float("model", "growth"),
            noise_strength=eps,
            noise=rules[0],
        )
        return model
    if name == "sir":
        keys = ("lam", "eta", "delta", "beta", "c1", "c2", "c3", "d1", "d2", "alpha1", "alpha2")
        kw = {k: cfg.float("model", k) for k in keys}
        kw["sigma"] = cfg.float("model", "sigma_rec")
        try:
            return M.build_sir(M.SirParams(**kw), dom)
        except ModelError as exc:
            key = str(exc).split()[2] if "parameter" in str(exc) else "model"
            raise ConfigError(f"model.{key}", str(exc)) from exc
    # lv
    return M.build_lv(lv_params(cfg), dom, tracked=tracked or (0,))


def lv_params(cfg: RunConfig):
    from . import models as M

    m = cfg.int("model", "species", minimum=1)
    rates = cfg.floats("model", "rates")
    A = cfg.matrix("model", "interaction")
    if len(rates) != m:
        raise ConfigError("model.rates", f"need {m} growth rates")
    if A is None or len(A) != m or len(A[0]) != m:
        raise ConfigError("model.interaction", f"need a {m}x{m} matrix")
    diff = cfg.floats("model", "diffusion")
    diff = diff * m if len(diff) == 1 else diff
    if len(diff) != m or any(d <= 0 for d in diff):
        raise ConfigError("model.diffusion", f"need 1 or {m} positive values")
    return M.LvParams(
        growth=rates,
        interaction=A,
        diffusion=diff,
        eps=cfg.noise_strengths(m),
        noise=cfg.noise_rules(m),
        independent=cfg.bool("noise", "independent"),
    )


def build_delay(cfg: RunConfig):
    from .delay import delay_logistic, delay_lv

    name = cfg.str("model", "name", MODEL_NAMES)
    horizon = cfg.float("model", "horizon", nonneg=True)
    if name == "delay_logistic":
        rate = cfg.floats("model", "rates")[:1] or [1.0]
        return delay_logistic(horizon, cfg.float("model", "g"), growth=rate[0])
    if name == "delay_lv":
        m = cfg.int("model", "species", minimum=1)
        rates = cfg.floats("model", "rates")
        A = cfg.matrix("model", "interaction")
        if len(rates) != m:
            raise ConfigError("model.rates", f"need {m} growth rates")
        if A is None or len(A) != m or len(A[0]) != m:
            raise ConfigError("model.interaction", f"need a {m}x{m} matrix")
        g = cfg.floats("model", "g")
        g = g * m if len(g) == 1 else g
        cov = cfg.matrix("model", "covariance") or np.eye(m).tolist()
        try:
            return delay_lv(horizon, rates, A, g, cov)
        except ValueError as exc:
            raise ConfigError("model.covariance", str(exc)) from exc
    raise ConfigError("model.name", f"{name} is not a delay model")

