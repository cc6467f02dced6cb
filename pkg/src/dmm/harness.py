"""Batch commands behind the CLI: data generation, gradient suite, scaling
benchmark, overfit run and SFAC reports.

Every command takes a :class:`HarnessConfig` and writes CSV files into the
configured output directory.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import serialize
from . import tensor as T
from .backbone import BackboneConfig, FeaturePair, VSSBlockParams, backbone_forward, vss_block
from .dcfm import CABParams, DcfmParams, cab_forward, dcfm_forward, dssm_forward
from .gradcheck import GradcheckReport, gradcheck
from .model import DMMModel, attention_maps, build_targets, model_loss, rgb_attention_features
from .mta import MTA_KERNELS, MtaParams, TpaHead, mta_forward, total_loss, tpa_forward
from .sfac import (
    AnnotatedImage,
    Box,
    SFACReport,
    format_report,
    read_annotations,
    sfac_report,
    write_annotations,
    write_report_csv,
)
from .ssm import SS2DParams, SSMParams, discretize_zoh, scan_flops, scan_parallel, selective_scan, ss2d_forward
from .synthetic import SyntheticPair, gen_synthetic_pairs
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_LENGTHS = tuple(1024 * 2**k for k in range(7))


class HarnessError(RuntimeError):
    pass


class DivergenceError(HarnessError):
    pass


# -- configuration --------------------------------------------------------------


@dataclass
class HarnessConfig:
    seed: int = 0
    precision: int = 64
    out: str = "runs"
    threads: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    reverse_branch: bool = True
    mta_kernels: tuple[int, ...] = MTA_KERNELS
    tpa_steps: int = 300
    tpa_lr: float = 0.1
    bench_lengths: tuple[int, ...] = DEFAULT_LENGTHS
    bench_trials: int = 2
    bench_warmup: int = 1
    bench_dim: int = 16
    bench_state: int = 16
    bench_precision: int = 32
    bench_attention: bool = True
    attention_block: int = 512
    n_pairs: int = 8
    image_size: int = 64
    steps: int = 500
    lr: float = 0.03
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.precision not in (32, 64) or self.bench_precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if list(self.bench_lengths) != sorted(set(self.bench_lengths)) or not self.bench_lengths:
            raise ValueError("bench lengths must be strictly ascending")
        if self.bench_trials < 1 or self.bench_warmup < 0:
            raise ValueError("bench needs at least one timed trial")
        if not 1 <= self.n_pairs <= 16:
            raise ValueError("overfit uses between 1 and 16 pairs")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @classmethod
    def from_ini(cls, path: str | Path | None = None, **overrides) -> "HarnessConfig":
        """Read an INI file; keyword ``overrides`` (e.g. from CLI flags) win.

        Sections and keys::

            [harness]  seed precision out threads
            [backbone] stem_channels depths widths n_state shared_streams skip
            [dcfm]     reverse_branch
            [mta]      kernels
            [tpa]      steps lr
            [bench]    lengths trials warmup dim state precision attention block
            [overfit]  n image_size steps lr divergence_factor
        """
        kw: dict = {}
        bb: dict = {}
        if path is not None:
            cp = configparser.ConfigParser()
            if not cp.read(path):
                raise FileNotFoundError(f"config file {path} not found")
            ints = lambda s: tuple(int(v) for v in s.replace(",", " ").split())
            table = {
                ("harness", "seed"): ("seed", int),
                ("harness", "precision"): ("precision", int),
                ("harness", "out"): ("out", str),
                ("harness", "threads"): ("threads", int),
                ("dcfm", "reverse_branch"): ("reverse_branch", "bool"),
                ("mta", "kernels"): ("mta_kernels", ints),
                ("tpa", "steps"): ("tpa_steps", int),
                ("tpa", "lr"): ("tpa_lr", float),
                ("bench", "lengths"): ("bench_lengths", ints),
                ("bench", "trials"): ("bench_trials", int),
                ("bench", "warmup"): ("bench_warmup", int),
                ("bench", "dim"): ("bench_dim", int),
                ("bench", "state"): ("bench_state", int),
                ("bench", "precision"): ("bench_precision", int),
                ("bench", "attention"): ("bench_attention", "bool"),
                ("bench", "block"): ("attention_block", int),
                ("overfit", "n"): ("n_pairs", int),
                ("overfit", "image_size"): ("image_size", int),
                ("overfit", "steps"): ("steps", int),
                ("overfit", "lr"): ("lr", float),
                ("overfit", "divergence_factor"): ("divergence_factor", float),
            }
            bb_table = {
                "stem_channels": int,
                "depths": ints,
                "widths": ints,
                "n_state": int,
                "shared_streams": "bool",
                "skip": "bool",
            }
            for section in cp.sections():
                for key in cp[section]:
                    if section == "backbone" and key in bb_table:
                        conv = bb_table[key]
                        bb[key] = cp.getboolean(section, key) if conv == "bool" else conv(cp[section][key])
                        continue
                    if (section, key) not in table:
                        raise ValueError(f"{path}: unknown setting [{section}] {key}")
                    name, conv = table[(section, key)]
                    kw[name] = cp.getboolean(section, key) if conv == "bool" else conv(cp[section][key])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        if "backbone" not in kw:
            kw["backbone"] = BackboneConfig(**bb)
        return cls(**kw)


def _prepare(cfg: HarnessConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- gen ------------------------------------------------------------------------


def pair_batch(pairs: list[SyntheticPair], dtype=np.float64) -> tuple[Tensor, Tensor]:
    rgb = Tensor(np.stack([p.rgb for p in pairs]).astype(dtype))
    ir = Tensor(np.stack([p.ir for p in pairs]).astype(dtype))
    return rgb, ir


def image_id(i: int) -> str:
    return f"pair{i:03d}"


def run_gen(cfg: HarnessConfig) -> list[SyntheticPair]:
    """Write ``n_pairs`` synthetic pairs as DMMT tensors plus an annotation CSV."""
    out = _prepare(cfg) / "pairs"
    out.mkdir(exist_ok=True)
    pairs = gen_synthetic_pairs(cfg.n_pairs, cfg.image_size, cfg.image_size, cfg.seed)
    for i, p in enumerate(pairs):
        for kind in ("rgb", "ir", "mask"):
            serialize.save(getattr(p, kind).astype(cfg.dtype), out / f"{image_id(i)}_{kind}.dmmt")
    write_annotations(out / "annotations.csv", {image_id(i): p.boxes for i, p in enumerate(pairs)})
    return pairs


# -- gradcheck --------------------------------------------------------------------


@dataclass
class Check:
    """One gradient check: ``build(rng)`` returns ``(f, inputs)`` for :func:`gradcheck`."""

    name: str
    covers: tuple[str, ...]
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    max_coords: int | None = None


def _leaf(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        data = rng.normal(size=shape)
    else:
        data = rng.uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=True)


def _probe(y: Tensor, seed: int) -> Tensor:
    # a fixed random projection makes every output coordinate matter
    return T.tsum(y * Tensor(np.random.default_rng(seed).normal(size=y.shape)))


def _unary(op):
    def build(rng):
        ps = _seed(rng)
        x = _leaf(rng, 3, 4)
        return (lambda x: _probe(op(x), ps)), [x]

    return build


def _seed(rng) -> int:
    return int(rng.integers(2**31))


def _checks_elementwise() -> list[Check]:
    out = []
    for name, fn in (("exp", T.exp), ("sigmoid", T.sigmoid), ("relu", T.relu), ("silu", T.silu), ("softplus", T.softplus)):
        out.append(Check(name, (name,), _unary(fn)))

    def binary(op, denom=False):
        def build(rng):
            ps = _seed(rng)
            a = _leaf(rng, 3, 4)
            b = _leaf(rng, 4, lo=0.5, hi=2.0) if denom else _leaf(rng, 4)  # broadcast over rows
            return (lambda a, b: _probe(op(a, b), ps)), [a, b]

        return build

    out += [
        Check("add", ("add",), binary(T.add)),
        Check("sub", ("sub",), binary(T.sub)),
        Check("mul", ("mul",), binary(T.mul)),
        Check("div", ("div",), binary(T.div, denom=True)),
    ]
    return out


def _check_linear(rng):
    ps = _seed(rng)
    x, W, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return (lambda x, W, b: _probe(T.linear(x, W, b), ps)), [x, W, b]


def _conv_check(cin, cout, k, stride, padding, groups):
    def build(rng):
        ps = _seed(rng)
        x = _leaf(rng, 2, cin, 5, 6)
        w = _leaf(rng, cout, cin // groups, k, k)
        b = _leaf(rng, cout)
        return (lambda x, w, b: _probe(T.conv2d(x, w, b, stride, padding, groups), ps)), [x, w, b]

    return build


def _check_layernorm(rng):
    ps = _seed(rng)
    x, g, b = _leaf(rng, 2, 5, 3, 3), _leaf(rng, 5), _leaf(rng, 5)
    return (lambda x, g, b: _probe(T.layernorm(x, g, b), ps)), [x, g, b]


def _check_pools(rng):
    ps = _seed(rng)
    x = _leaf(rng, 2, 3, 4, 4)
    return (
        lambda x: _probe(T.pool_avg(x, (2, 3)), ps)
        + _probe(T.pool_max(x, (2, 3)), ps)
        + _probe(T.pool_max(x, (1,)), ps)
        + _probe(T.tsum(x, axis=1), ps)
    ), [x]


def _check_movement(rng):
    ps = _seed(rng)
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)

    def f(a, b):
        c = T.concat([a, b], axis=1)
        c = T.reverse(T.permute(c, (2, 0, 1)), 0)
        c = T.reshape(c, (4, 10))
        c = T.slice_axis(c, 1, 2, 9)
        return _probe(T.take(c, np.array([3, 0, 0, 2]), axis=0), ps)

    return f, [a, b]


def _check_expm1_div(rng):
    ps = _seed(rng)
    z = Tensor(np.concatenate([rng.uniform(-3, 1, 8), [-1e-3, 2e-3, -5e-2, 3e-2]]), requires_grad=True)
    return (lambda z: _probe(T.expm1_div(z), ps)), [z]


def _check_recurrence(rng):
    ps = _seed(rng)
    a = _leaf(rng, 2, 7, 3, lo=0.2, hi=0.95)
    b = _leaf(rng, 2, 7, 3)
    return (lambda a, b: _probe(T.recurrence(a, b, axis=1), ps)), [a, b]


def _check_scan_core(rng):
    ps = _seed(rng)
    N, L, D, S = 2, 6, 3, 2
    x = _leaf(rng, N, L, D)
    delta = _leaf(rng, N, L, D, lo=0.05, hi=0.8)
    A = _leaf(rng, D, S, lo=-2.0, hi=-0.3)
    B, C = _leaf(rng, N, L, S), _leaf(rng, N, L, S)
    return (lambda *a: _probe(T.selective_scan_core(*a), ps)), [x, delta, A, B, C]


def _check_losses(rng):
    logits = _leaf(rng, 6, 3)
    labels = rng.integers(0, 3, size=6)
    obj = _leaf(rng, 2, 1, 3, 3)
    mask = (rng.uniform(size=(2, 1, 3, 3)) < 0.4).astype(float)
    pred = _leaf(rng, 5, 4)
    target = rng.normal(size=(5, 4)) * 2.0

    def f(logits, obj, pred):
        parts = total_loss(
            T.cross_entropy(logits, labels),
            T.smooth_l1(pred, target),
            T.bce_logits(obj, mask),
            T.smooth_l1(pred * 0.5, target),
        )
        return parts.total

    return f, [logits, obj, pred]


def _small_cfg() -> BackboneConfig:
    return BackboneConfig(stem_channels=2, depths=(1, 1), widths=(2, 3), n_state=2)


def _check_selective_scan(rng):
    ps = _seed(rng)
    p = SSMParams.init(3, 2, rng)
    x = _leaf(rng, 2, 5, 3)
    params = T.parameters(p)
    return (
        lambda x, *_: _probe(selective_scan(x, p, fused=False), ps)
        + _probe(selective_scan(x, p), ps)
    ), [x] + params


def _check_zoh(rng):
    ps = _seed(rng)
    delta = _leaf(rng, 1, 4, 2, lo=0.05, hi=1.0)
    A = _leaf(rng, 2, 3, lo=-2.0, hi=-0.2)
    B = _leaf(rng, 1, 4, 3)
    x, C = Tensor(rng.normal(size=(1, 4, 2))), Tensor(rng.normal(size=(1, 4, 3)))

    def f(delta, A, B):
        Abar, Bbar = discretize_zoh(delta, A, B)
        return _probe(scan_parallel(x, Abar, Bbar, C), ps)

    return f, [delta, A, B]


def _check_ss2d(rng):
    ps = _seed(rng)
    p = SS2DParams.init(2, 2, rng)
    x = _leaf(rng, 1, 2, 3, 2)
    return (lambda x, *_: _probe(ss2d_forward(x, p), ps)), [x] + T.parameters(p)


def _check_vss(rng):
    ps = _seed(rng)
    p = VSSBlockParams.init(2, 2, rng)
    x = _leaf(rng, 1, 2, 3, 3)
    return (lambda x, *_: _probe(vss_block(x, p), ps)), [x] + T.parameters(p)


def _check_dcfm(rng):
    ps = _seed(rng)
    p = DcfmParams.init(2, 2, rng)
    a, b = _leaf(rng, 1, 2, 2, 3), _leaf(rng, 1, 2, 2, 3)
    return (lambda a, b, *_: _probe(dcfm_forward(FeaturePair(a, b), p), ps)), [a, b] + T.parameters(p)


def _check_dssm(rng):
    ps = _seed(rng)
    s1, s2 = SSMParams.init(2, 2, rng), SSMParams.init(2, 2, rng)
    f1, f2, fd = (_leaf(rng, 1, 2, 2, 2) for _ in range(3))

    def f(f1, f2, fd):
        y1, y2 = dssm_forward(f1, f2, fd, s1, s2)
        return _probe(y1, ps) + _probe(y2, ps)

    return f, [f1, f2, fd]


def _check_cab(rng):
    ps = _seed(rng)
    p = CABParams.init(3, rng)
    x = _leaf(rng, 2, 3, 2, 2)
    return (lambda x, *_: _probe(cab_forward(x, p), ps)), [x] + T.parameters(p)


def _check_mta(rng):
    ps = _seed(rng)
    p = MtaParams.init(2, rng)
    x = _leaf(rng, 1, 2, 4, 4)
    return (lambda x, *_: _probe(mta_forward(x, p), ps)), [x] + T.parameters(p)


def _check_tpa(rng):
    head = TpaHead.init(2, rng)
    x = _leaf(rng, 2, 2, 3, 3)
    mask = np.zeros((2, 1, 3, 3))
    mask[0, 0, 1, 1] = mask[1, 0, 0, 2] = 1
    offsets = rng.normal(size=(2, 4, 3, 3))

    def f(x, *_):
        c, r = tpa_forward(x, head, mask, offsets)
        return c + r

    return f, [x] + head.tensors()


def _check_backbone(rng):
    ps = _seed(rng)
    cfg = _small_cfg()
    from .backbone import BackboneParams

    p = BackboneParams.init(cfg, rng)
    rgb, ir = _leaf(rng, 1, 3, 8, 8), _leaf(rng, 1, 3, 8, 8)

    def f(rgb, ir, *_):
        total = None
        for pair in backbone_forward(rgb, ir, p):
            term = _probe(pair.rgb, ps) + _probe(pair.ir, ps)
            total = term if total is None else total + term
        return total

    return f, [rgb, ir] + T.parameters(p)


def _check_model(rng):
    from .sfac import Box

    model = DMMModel.init(_small_cfg(), seed=int(rng.integers(1000)))
    rgb, ir = _leaf(rng, 1, 3, 8, 8), _leaf(rng, 1, 3, 8, 8)
    targets = build_targets([[Box(3.0, 4.0, 4.0, 4.0)]], 8, 8, 2)

    def f(*_):
        return model_loss(model, rgb, ir, targets).total

    return f, [rgb] + model.trainable()


def default_checks() -> list[Check]:
    """Every registered op, then the composites."""
    checks = _checks_elementwise() + [
        Check("linear", ("linear",), _check_linear),
        Check("conv2d", ("conv2d",), _conv_check(4, 6, 3, 1, 1, 1)),
        Check("conv2d_strided", ("conv2d",), _conv_check(3, 4, 2, 2, 0, 1)),
        Check("conv2d_depthwise", ("conv2d",), _conv_check(4, 4, 3, 1, 1, 4)),
        Check("conv2d_grouped", ("conv2d",), _conv_check(4, 6, 3, 2, 1, 2)),
        Check("layernorm", ("layernorm",), _check_layernorm),
        Check("pools_sum", ("pool_avg", "pool_max", "sum"), _check_pools),
        Check("data_movement", ("concat", "reverse", "permute", "reshape", "slice", "take"), _check_movement),
        Check("expm1_div", ("expm1_div",), _check_expm1_div),
        Check("recurrence", ("recurrence",), _check_recurrence),
        Check("selective_scan_core", ("selective_scan_core",), _check_scan_core),
        Check("losses", ("cross_entropy", "smooth_l1", "bce_logits"), _check_losses),
        Check("zoh_scan_parallel", (), _check_zoh),
        Check("selective_scan", (), _check_selective_scan),
        Check("ss2d", (), _check_ss2d),
        Check("vss_block", (), _check_vss, max_coords=12),
        Check("cab", (), _check_cab),
        Check("dssm", (), _check_dssm),
        Check("dcfm_forward", (), _check_dcfm, max_coords=12),
        Check("mta_forward", (), _check_mta),
        Check("tpa_forward", (), _check_tpa),
        Check("backbone", (), _check_backbone, max_coords=8),
        Check("model_loss", (), _check_model, max_coords=4),
    ]
    return checks


def coverage_gap(checks: list[Check]) -> set[str]:
    covered = {name for c in checks for name in c.covers}
    return set(T.OPS) - covered


@dataclass
class GradcheckRow:
    name: str
    report: GradcheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def csv_row(self):
        r = self.report
        return [self.name, float(r.max_rel_error), r.n_checked, len(r.ambiguous), "pass" if r.passed else "FAIL"]


def run_gradcheck(
    cfg: HarnessConfig, checks: list[Check] | None = None, write: bool = True
) -> list[GradcheckRow]:
    """Run every check at 64-bit; the rows' count equals the number of checks."""
    if cfg.precision != 64:
        raise HarnessError("gradcheck requires 64-bit precision")
    checks = default_checks() if checks is None else checks
    gap = coverage_gap(checks)
    if gap:
        raise HarnessError(f"registered ops without a gradient check: {sorted(gap)}")
    rows = []
    with T.default_dtype(np.float64):
        for i, check in enumerate(checks):
            rng = np.random.default_rng([cfg.seed, i])
            f, inputs = check.build(rng)
            report = gradcheck(f, inputs, max_coords=check.max_coords, seed=cfg.seed)
            rows.append(GradcheckRow(check.name, report))
            log.info("gradcheck %-22s max_rel=%.3e n=%d", check.name, report.max_rel_error, report.n_checked)
    if write:
        _write_csv(
            _prepare(cfg) / "gradcheck.csv",
            ["check", "max_rel_error", "coords", "ambiguous", "status"],
            (r.csv_row() for r in rows),
        )
    return rows


# -- bench ------------------------------------------------------------------------


def blocked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int = 512) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v over all L x L pairs, one row block at a time."""
    L, d = q.shape
    out = np.empty_like(v)
    scale = 1.0 / math.sqrt(d)
    kt = np.ascontiguousarray(k.T)
    for s in range(0, L, block):
        scores = (q[s : s + block] @ kt) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s : s + block] = scores @ v
    return out


def loglog_slope(lengths, seconds) -> float:
    """Least-squares slope of log(seconds) against log(L)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(seconds, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class BenchResult:
    lengths: list[int]
    scan_mean: list[float]
    scan_std: list[float]
    attn_mean: list[float]
    attn_std: list[float]
    flops: list[int]

    @property
    def scan_slope(self) -> float:
        return loglog_slope(self.lengths, self.scan_mean)

    @property
    def attention_slope(self) -> float:
        return loglog_slope(self.lengths, self.attn_mean) if self.attn_mean else math.nan

    @property
    def doubling_ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.scan_mean, self.scan_mean[1:])]


def _time(fn, trials: int, warmup: int) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    if sum(ts) < 1e-6:
        raise HarnessError("timer resolution: aggregate trial time below 1 microsecond")
    return float(np.mean(ts)), float(np.std(ts))


def run_scaling_bench(cfg: HarnessConfig, write: bool = True) -> BenchResult:
    """Wall time of ``scan_parallel`` and of dense attention across sequence lengths."""
    dtype = np.float64 if cfg.bench_precision == 64 else np.float32
    D, S = cfg.bench_dim, cfg.bench_state
    rng = np.random.default_rng(cfg.seed)
    res = BenchResult([], [], [], [], [], [])
    for L in cfg.bench_lengths:
        x = Tensor(rng.normal(size=(1, L, D)).astype(dtype))
        Abar = Tensor(rng.uniform(0.5, 0.99, size=(1, L, D, S)).astype(dtype))
        Bbar = Tensor(rng.normal(size=(1, L, D, S)).astype(dtype))
        C = Tensor(rng.normal(size=(1, L, S)).astype(dtype))
        Dk = Tensor(np.ones(D, dtype=dtype))

        def scan():
            with T.no_grad():
                scan_parallel(x, Abar, Bbar, C, Dk)

        m, s = _time(scan, cfg.bench_trials, cfg.bench_warmup)
        res.lengths.append(L)
        res.scan_mean.append(m)
        res.scan_std.append(s)
        res.flops.append(scan_flops(L, D, S))
        del x, Abar, Bbar, C
        if cfg.bench_attention:
            q, k, v = (rng.normal(size=(L, D)).astype(dtype) for _ in range(3))
            m, s = _time(lambda: blocked_attention(q, k, v, cfg.attention_block), cfg.bench_trials, cfg.bench_warmup)
            res.attn_mean.append(m)
            res.attn_std.append(s)
        log.info("bench L=%d scan=%.4fs attention=%s", L, res.scan_mean[-1], res.attn_mean[-1:] or "-")
    if write:
        out = _prepare(cfg)
        _write_csv(
            out / "bench_scan.csv",
            ["L", "mean_seconds", "std", "flops"],
            zip(res.lengths, res.scan_mean, res.scan_std, res.flops),
        )
        if res.attn_mean:
            _write_csv(
                out / "bench_attention.csv", ["L", "mean_seconds", "std"], zip(res.lengths, res.attn_mean, res.attn_std)
            )
        _write_csv(
            out / "bench_summary.csv",
            ["series", "loglog_slope"],
            [("scan", res.scan_slope), ("attention", res.attention_slope)],
        )
    return res


# -- overfit ------------------------------------------------------------------------

LOSS_COLUMNS = ["step", "det_cls", "det_reg", "aux_cls", "aux_reg", "total"]


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Every tensor reachable from ``obj`` keyed by its attribute path (first path wins)."""
    out: dict[str, Tensor] = {}
    seen: set[int] = set()

    def walk(o, path):
        if isinstance(o, Tensor):
            if id(o) not in seen:
                seen.add(id(o))
                out[path] = o
        elif isinstance(o, (list, tuple)):
            for i, v in enumerate(o):
                walk(v, f"{path}.{i}")
        elif hasattr(o, "__dataclass_fields__"):
            for f in fields(o):
                walk(getattr(o, f.name), f"{path}.{f.name}" if path else f.name)

    walk(obj, prefix)
    return out


def digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


@dataclass
class OverfitResult:
    rows: list[tuple[int, float, float, float, float, float]]
    tpa_rows: list[tuple[int, float]]
    tpa_before: str
    tpa_after: str
    model: DMMModel
    pairs: list[SyntheticPair]
    seconds: float

    @property
    def initial(self) -> float:
        return self.rows[0][5]

    @property
    def final(self) -> float:
        return self.rows[-1][5]

    @property
    def ratio(self) -> float:
        return self.final / self.initial


def fit_tpa(model: DMMModel, rgb: Tensor, ir: Tensor, targets, steps: int, lr: float) -> list[tuple[int, float]]:
    """Phase 1: fit the target-prior heads on fixed MTA features, then freeze them."""
    with T.no_grad():
        feats = [post for _, post in rgb_attention_features(model, rgb, ir)]
    params = [t for h in model.tpa for t in h.tensors()]
    rows = []
    for step in range(steps):
        loss = None
        for s, head in enumerate(model.tpa):
            c, r = tpa_forward(feats[s], head, targets[s].mask, targets[s].offsets)
            term = c + r
            loss = term if loss is None else loss + term
        T.zero_grads(params)
        T.backward(loss)
        for p in params:
            p.data -= lr * p.grad
        rows.append((step, loss.item()))
    for head in model.tpa:
        head.freeze()
    return rows


def run_overfit(cfg: HarnessConfig, write: bool = True) -> OverfitResult:
    """Two-phase toy training: pre-fit and freeze TPA, then plain gradient descent on the rest."""
    t0 = time.perf_counter()
    with T.default_dtype(cfg.dtype):
        pairs = gen_synthetic_pairs(cfg.n_pairs, cfg.image_size, cfg.image_size, cfg.seed)
        rgb, ir = pair_batch(pairs, cfg.dtype)
        model = DMMModel.init(
            cfg.backbone, cfg.seed, mta_kernels=cfg.mta_kernels, reverse_branch=cfg.reverse_branch
        )
        targets = build_targets([p.boxes for p in pairs], cfg.image_size, cfg.image_size, cfg.backbone.stages)
        tpa_rows = fit_tpa(model, rgb, ir, targets, cfg.tpa_steps, cfg.tpa_lr)
        tpa_tensors = [t for h in model.tpa for t in h.tensors()]
        before = digest(tpa_tensors)

        params = model.trainable()
        rows = []
        for step in range(cfg.steps + 1):
            try:
                lb = model_loss(model, rgb, ir, targets)
            except T.NonFiniteError as exc:
                raise DivergenceError(f"step {step}: non-finite value ({exc})") from exc
            row = (step,) + lb.row()
            rows.append(row)
            if row[5] > cfg.divergence_factor * rows[0][5]:
                raise DivergenceError(
                    f"step {step}: total loss {row[5]:.4g} exceeds {cfg.divergence_factor:g}x the initial "
                    f"{rows[0][5]:.4g}; terms det_cls={row[1]:.4g} det_reg={row[2]:.4g} "
                    f"aux_cls={row[3]:.4g} aux_reg={row[4]:.4g}; lower the learning rate ({cfg.lr:g})"
                )
            if step == cfg.steps:
                break
            T.zero_grads(params)
            T.backward(lb.total)
            for p in params:
                p.data -= cfg.lr * p.grad
        after = digest(tpa_tensors)

    res = OverfitResult(rows, tpa_rows, before, after, model, pairs, time.perf_counter() - t0)
    if write:
        out = _prepare(cfg)
        _write_csv(out / "overfit_loss.csv", LOSS_COLUMNS, rows)
        _write_csv(out / "overfit_tpa.csv", ["step", "loss"], tpa_rows)
        np.savez(out / "checkpoint.npz", **{k: t.data for k, t in named_tensors(model).items()})
        export_attention(out / "attention", model, pairs, cfg.dtype)
    return res


def export_attention(root: Path, model: DMMModel, pairs: list[SyntheticPair], dtype=np.float64) -> None:
    """Stage-0 RGB attention maps before (``baseline``) and after (``mta``) MTA, plus annotations."""
    rgb, ir = pair_batch(pairs, dtype)
    pre, post = attention_maps(model, rgb, ir)
    for name, maps in (("baseline", pre), ("mta", post)):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(maps):
            serialize.save(m, d / f"{image_id(i)}.dmmt")
    write_annotations(root / "annotations.csv", {image_id(i): p.boxes for i, p in enumerate(pairs)})


# -- sfac ---------------------------------------------------------------------------


@dataclass
class SfacRun:
    report: SFACReport
    missing: int


def load_annotated(
    attention_dir: str | Path,
    annotations: dict[str, list[Box]],
    image_size: tuple[int, int] | None = None,
) -> tuple[list[AnnotatedImage], int]:
    """Pair each annotated image with ``<id>.dmmt`` from ``attention_dir``; returns (images, missing)."""
    images, missing = [], 0
    root = Path(attention_dir)
    for image_id_, boxes in annotations.items():
        path = root / f"{image_id_}.dmmt"
        if not path.exists():
            missing += 1
            log.warning("no attention map for annotated image %s", image_id_)
            continue
        amap = serialize.load(path).data
        if amap.ndim != 2:
            raise HarnessError(f"{path}: attention map must be 2-D, got shape {amap.shape}")
        H, W = image_size if image_size is not None else amap.shape
        images.append(AnnotatedImage.from_boxes(amap, H, W, boxes, image_id_))
    return images, missing


def run_sfac_report(
    cfg: HarnessConfig,
    attention_dir: str | Path,
    annotations: str | Path,
    compare_dir: str | Path | None = None,
    image_size: tuple[int, int] | None = None,
    scale: bool = True,
    write: bool = True,
) -> tuple[SfacRun, SfacRun | None]:
    """Per-bucket SFAC for one attention directory, or two with their deltas."""
    boxes = read_annotations(annotations)
    if not boxes:
        raise HarnessError(f"{annotations}: no annotated targets")
    runs = []
    for d in [attention_dir] + ([compare_dir] if compare_dir is not None else []):
        images, missing = load_annotated(d, boxes, image_size)
        if not images:
            raise HarnessError(f"{d}: no attention maps match the annotations")
        runs.append(SfacRun(sfac_report(images, scale), missing))
    first = runs[0]
    second = runs[1] if len(runs) > 1 else None
    if write:
        out = _prepare(cfg)
        write_report_csv(out / "sfac.csv", first.report)
        if second is not None:
            write_report_csv(out / "sfac_compare.csv", second.report)
            _write_csv(out / "sfac_delta.csv", ["bucket", "sfac_a", "sfac_b", "delta", "relative"], delta_rows(first, second))
    return first, second


def delta_rows(a: SfacRun, b: SfacRun):
    rows = []
    for (bucket, va, *_), (_, vb, *_) in zip(a.report.rows(), b.report.rows()):
        rel = (vb - va) / va if va and not math.isnan(va) else math.nan
        rows.append((bucket, va, vb, vb - va, rel))
    return rows


def describe_sfac(first: SfacRun, second: SfacRun | None) -> str:
    text = format_report(first.report, "SFAC (a)")
    if first.missing:
        text += f"\n  skipped {first.missing} annotated image(s) without a map"
    if second is not None:
        text += "\n" + format_report(second.report, "SFAC (b)")
        for bucket, va, vb, d, rel in delta_rows(first, second):
            text += f"\n  delta@{bucket:<3} = {d:+.6f} ({rel:+.1%})"
    return text


def thread_limit(cfg: HarnessConfig):
    """Cap BLAS/OpenMP pools; one thread keeps floating-point reductions bit-stable."""
    return threadpool_limits(limits=cfg.threads)


