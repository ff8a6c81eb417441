"""Self-checks shared by the ``selfcheck`` command and the acceptance tests.

The monitor sweep compares formula progression against a vectorised
three-valued evaluation of every formula up to a given depth on every short
trace. The numeric sweep runs finite-difference gradient checks on the
differentiable primitives. The shield checks drive the latent filter with a
mock model whose risks are known.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import numerics as nx
from .shield import ShieldConfig, abps_filter, estimate_violation_probability
from .scltl import (
    FALSE, TRUE, And, Atom, Eventually, FalseF, Monitor, Next, NotAtom, Or, Status, TrueF, Until,
    Verdict, progress, semantic_verdict,
)

# three-valued encoding: ordering F < U < T makes Kleene "or" a max and "and" a min
F3, U3, T3 = np.int8(0), np.int8(1), np.int8(2)


def enumerate_formulas(depth: int, props: Sequence[str] = ("a", "b")) -> list:
    """Every formula of AST depth <= ``depth`` built from true and (negated) atoms."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    layers = [[TRUE] + [Atom(p) for p in props] + [NotAtom(p) for p in props]]
    for _ in range(depth - 1):
        below = layers[-1]
        nxt = list(layers[0])
        nxt += [Next(g) for g in below] + [Eventually(g) for g in below]
        for op in (And, Or, Until):
            nxt += [op(x, y) for x in below for y in below]
        layers.append(nxt)
    return layers[-1]


def all_traces(props: Sequence[str], length: int) -> tuple[np.ndarray, list[frozenset]]:
    """Index array ``[4**length, length]`` over the valuations of ``props``."""
    vals = [frozenset(c) for r in range(len(props) + 1) for c in itertools.combinations(props, r)]
    idx = np.array(list(itertools.product(range(len(vals)), repeat=length)), dtype=np.int64)
    return idx, vals


class KleeneTable:
    """Truth values ``[trace, prefix length - 1, position]`` for every trace prefix.

    Position ``i`` of a prefix of length ``n`` is unknown once ``i >= n``
    except for constants and boolean combinations.
    """

    def __init__(self, trace_idx: np.ndarray, vals: list[frozenset]):
        self.trace_idx = trace_idx
        self.n_traces, self.length = trace_idx.shape
        L = self.length
        self.inside = (np.arange(L + 1)[None, :] < np.arange(1, L + 1)[:, None])[None]  # [1, n, i]
        self._atoms: dict = {}
        self.vals = vals
        self._memo: dict = {}

    def _atom(self, name: str, negated: bool) -> np.ndarray:
        key = (name, negated)
        if key not in self._atoms:
            holds = np.array([name in v for v in self.vals])[self.trace_idx]  # [T, L]
            if negated:
                holds = ~holds
            pos = np.concatenate([holds, np.zeros((self.n_traces, 1), bool)], 1)  # [T, L+1]
            vals = np.where(pos, T3, F3)[:, None, :].repeat(self.length, 1)
            self._atoms[key] = np.where(self.inside, vals, U3).astype(np.int8)
        return self._atoms[key]

    def value(self, g, cache: bool = True) -> np.ndarray:
        if g in self._memo:
            return self._memo[g]
        shape = (self.n_traces, self.length, self.length + 1)
        if isinstance(g, TrueF):
            r = np.full(shape, T3)
        elif isinstance(g, FalseF):
            r = np.full(shape, F3)
        elif isinstance(g, Atom):
            r = self._atom(g.name, False)
        elif isinstance(g, NotAtom):
            r = self._atom(g.name, True)
        elif isinstance(g, Or):
            r = np.maximum(self.value(g.lhs), self.value(g.rhs))
        elif isinstance(g, And):
            r = np.minimum(self.value(g.lhs), self.value(g.rhs))
        elif isinstance(g, Next):
            sub = self.value(g.sub)
            shifted = np.concatenate([sub[..., 1:], np.full(shape[:2] + (1,), U3)], -1)
            r = np.where(self.inside, shifted, U3)
        elif isinstance(g, (Until, Eventually)):
            lhs = None if isinstance(g, Eventually) else self.value(g.lhs)
            rhs = self.value(g.sub if isinstance(g, Eventually) else g.rhs)
            r = np.full(shape, U3)
            later = np.full(shape[:2], U3)
            for i in range(self.length - 1, -1, -1):
                stay = later if lhs is None else np.minimum(lhs[..., i], later)
                cand = np.maximum(rhs[..., i], stay)
                later = np.where(self.inside[..., i], cand, U3)
                r[..., i] = later
        else:
            raise TypeError(f"not a formula: {g!r}")
        r = r.astype(np.int8, copy=False)
        if cache:
            self._memo[g] = r
        return r

    def verdicts(self, g) -> np.ndarray:
        """``[trace, prefix length - 1]`` values at position 0 for a top-level formula."""
        return self.value(g, cache=False)[..., 0]


def residual_table(f, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of ``f`` reachable in ``steps`` steps: ``next[state, valuation]``, ``status[state]``.

    Syntactic progression need not close over a finite set, so the search is
    cut at ``steps``; rows of states at the cut are -1. Valuation indices
    follow :func:`all_traces` for propositions ``a``, ``b``.
    """
    vals = all_traces(("a", "b"), 1)[1]
    start = Monitor.start(f).current
    index = {start: 0}
    order = [start]
    depth = [0]
    nxt = []
    k = 0
    while k < len(order):
        g = order[k]
        row = [-1] * len(vals)
        if depth[k] < steps:
            for j, v in enumerate(vals):
                h = progress(g, v)
                if h not in index:
                    index[h] = len(order)
                    order.append(h)
                    depth.append(depth[k] + 1)
                row[j] = index[h]
        nxt.append(row)
        k += 1
    status = np.array([T3 if g == TRUE else F3 if g == FALSE else U3 for g in order], dtype=np.int8)
    return np.array(nxt, dtype=np.int64), status


def monitor_statuses(f, trace_idx: np.ndarray) -> np.ndarray:
    """Monitor status after each prefix, ``[trace, prefix length - 1]`` in the F/U/T code."""
    table, status = residual_table(f, trace_idx.shape[1])
    state = np.zeros(trace_idx.shape[0], dtype=np.int64)
    out = np.empty(trace_idx.shape, dtype=np.int8)
    for t in range(trace_idx.shape[1]):
        resolved = status[state] != U3
        state = np.where(resolved, state, table[state, trace_idx[:, t]])
        out[:, t] = status[state]
    return out


@dataclass
class SweepReport:
    formulas: int
    comparisons: int
    mismatches: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.mismatches


_VERDICT_CODE = {Verdict.VIOLATED: F3, Verdict.PENDING: U3, Verdict.SATISFIED: T3}


def progression_sweep(depth: int = 3, length: int = 5, props: Sequence[str] = ("a", "b"),
                      spot_checks: int = 200, seed: int = 0) -> SweepReport:
    """Compare monitor statuses with the three-valued evaluation on every formula and trace.

    A random subset of cases is also replayed through the scalar
    :func:`semantic_verdict` to keep the vectorised evaluation honest.
    """
    if tuple(props) != ("a", "b"):
        raise ValueError("the residual tables are built for propositions a and b")
    t0 = time.perf_counter()
    trace_idx, vals = all_traces(props, length)
    table = KleeneTable(trace_idx, vals)
    for g in enumerate_formulas(depth - 1, props) if depth > 1 else []:
        table.value(g)
    formulas = enumerate_formulas(depth, props)
    report = SweepReport(len(formulas), 0)
    for f in formulas:
        expect = table.verdicts(f)
        got = monitor_statuses(f, trace_idx)
        report.comparisons += expect.size
        bad = np.argwhere(expect != got)
        if bad.size:
            tr, n = bad[0]
            report.mismatches.append((f, [vals[j] for j in trace_idx[tr, : n + 1]]))

    rng = np.random.default_rng(seed)
    for _ in range(spot_checks):
        f = formulas[rng.integers(len(formulas))]
        tr = rng.integers(len(trace_idx))
        n = int(rng.integers(1, length + 1))
        trace = [vals[j] for j in trace_idx[tr, :n]]
        if _VERDICT_CODE[semantic_verdict(f, trace)] != table.verdicts(f)[tr, n - 1]:
            report.mismatches.append((f, trace))
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# numerics


@dataclass
class PrimitiveCase:
    name: str
    fn: Callable[..., torch.Tensor]
    inputs: list


def _away_from_zero(g: torch.Generator, *shape) -> torch.Tensor:
    # keeps finite differences clear of the relu kink
    x = torch.randn(*shape, generator=g, dtype=torch.float64)
    return x + 0.1 * torch.sign(x)


def primitive_cases(seed: int) -> list[PrimitiveCase]:
    """One randomly shaped instance of every differentiable primitive.

    The balanced KL is left out: its stop-gradients make the gradient differ
    from the derivative of its value on purpose.
    """
    g = torch.Generator().manual_seed(seed)

    def dim(lo=1, hi=5):
        return int(torch.randint(lo, hi + 1, (), generator=g))

    def rn(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    b, i, o, h = dim(), dim(), dim(), dim()
    out = [
        PrimitiveCase("affine", lambda x, W, c: nx.affine(x, W, c).sin().sum(), [rn(b, i), rn(o, i), rn(o)]),
        PrimitiveCase("relu", lambda x: (nx.relu(x) ** 2).sum(), [_away_from_zero(g, b, i)]),
        PrimitiveCase("elu", lambda x: (nx.elu(x) ** 2).sum(), [_away_from_zero(g, b, i)]),
        PrimitiveCase("tanh", lambda x: nx.tanh(x).pow(3).sum(), [rn(b, i)]),
        PrimitiveCase("gru_cell",
                      lambda hh, x, Wx, Wh, bx, bh: nx.gru_cell(hh, x, Wx, Wh, bx, bh).pow(2).sum(),
                      [rn(b, h), rn(b, i), 0.5 * rn(3 * h, i), 0.5 * rn(3 * h, h), rn(3 * h), rn(3 * h)]),
        PrimitiveCase("gaussian_from_raw",
                      lambda m, r: nx.DiagGaussian.from_raw(m, r).std.log().sum() + m.pow(2).sum(),
                      [rn(b, o), rn(b, o)]),
        PrimitiveCase("reparam_sample",
                      lambda m, s: nx.sample_reparam(nx.DiagGaussian(m, s.exp()),
                                                     torch.Generator().manual_seed(seed)).pow(2).sum(),
                      [rn(b, o), 0.3 * rn(b, o)]),
        PrimitiveCase("kl_diag_gaussian",
                      lambda m1, s1, m2, s2: nx.kl_diag_gaussian(nx.DiagGaussian(m1, s1.exp()),
                                                                 nx.DiagGaussian(m2, s2.exp())).sum(),
                      [rn(b, o), 0.5 * rn(b, o), rn(b, o), 0.5 * rn(b, o)]),
        PrimitiveCase("weighted_bce",
                      lambda x: nx.weighted_bce(x, (torch.arange(x.numel()) % 2).reshape(x.shape).double(),
                                                3.0).sum(),
                      [rn(b, o)]),
        PrimitiveCase("mse", lambda x, y: 0.5 * ((x - y) ** 2).mean(), [rn(b, o), rn(b, o)]),
        PrimitiveCase("softplus", lambda x: F.softplus(x).pow(2).sum(), [rn(b, o)]),
    ]
    return out


@dataclass
class NumericReport:
    worst: dict
    failures: list
    kl_self_max: float
    kl_min: float
    bce_values: tuple

    @property
    def ok(self) -> bool:
        return (not self.failures and abs(self.kl_self_max) < 1e-9 and self.kl_min >= 0.0
                and abs(self.bce_values[0] - 3 * np.log(2)) < 1e-6 and abs(self.bce_values[1] - np.log(2)) < 1e-6)


def numeric_sweep(seeds: int = 100, tolerance: float = 1e-4,
                  corrupt: Callable[[str, torch.Tensor], torch.Tensor] | None = None) -> NumericReport:
    """Gradient checks on ``seeds`` random instances of every primitive plus KL and BCE identities.

    ``corrupt`` may rewrite a primitive's output (by name) to show the check
    catches wrong gradients.
    """
    worst: dict = {}
    failures = []
    for s in range(seeds):
        for case in primitive_cases(s):
            fn = case.fn
            if corrupt is not None:
                fn = (lambda f, n: (lambda *xs: corrupt(n, f(*xs))))(case.fn, case.name)
            rep = nx.grad_check(fn, case.inputs, tolerance)
            worst[case.name] = max(worst.get(case.name, 0.0), rep.max_rel_error)
            if not rep.passed:
                failures.append((case.name, s, rep.max_rel_error))

    g = torch.Generator().manual_seed(1234)
    kl_self = 0.0
    kl_min = float("inf")
    for _ in range(seeds):
        m1, m2 = torch.randn(8, 6, generator=g, dtype=torch.float64), torch.randn(8, 6, generator=g, dtype=torch.float64)
        s1 = torch.rand(8, 6, generator=g, dtype=torch.float64) * 3 + 0.05
        s2 = torch.rand(8, 6, generator=g, dtype=torch.float64) * 3 + 0.05
        q, p = nx.DiagGaussian(m1, s1), nx.DiagGaussian(m2, s2)
        kl_self = max(kl_self, float(nx.kl_diag_gaussian(q, q).abs().max()))
        kl_min = min(kl_min, float(nx.kl_diag_gaussian(q, p).min()))
    zero = torch.zeros((), dtype=torch.float64)
    bce = (float(nx.weighted_bce(zero, torch.ones((), dtype=torch.float64), 3.0)),
           float(nx.weighted_bce(zero, torch.zeros((), dtype=torch.float64), 3.0)))
    return NumericReport(worst, failures, kl_self, kl_min, bce)


def iter_lines(report) -> Iterator[str]:
    if isinstance(report, ShieldReport):
        for name, ok, detail in report.results:
            yield f"shield {name}: {'ok' if ok else 'FAILED'} ({detail})"
    elif isinstance(report, SweepReport):
        yield (f"progression: {report.formulas} formulas, {report.comparisons} prefix verdicts, "
               f"{len(report.mismatches)} mismatches, {report.seconds:.1f}s")
        for f, trace in report.mismatches[:5]:
            yield f"  mismatch: {f} on {[sorted(v) for v in trace]}"
    else:
        for name, err in sorted(report.worst.items()):
            yield f"grad {name}: max relative error {err:.2e}"
        yield f"kl(q||q) max {report.kl_self_max:.2e}, kl min {report.kl_min:.3e}"
        yield f"weighted bce (y=1, y=0) at logit 0: {report.bce_values[0]:.6f}, {report.bce_values[1]:.6f}"
        for name, s, err in report.failures[:5]:
            yield f"  FAILED {name} seed {s}: {err:.2e}"


# ---------------------------------------------------------------------------
# shield


class BernoulliRiskModel:
    """Stands in for the world model: each imagined trajectory after first
    action ``a`` is unsafe independently with probability ``risk(a)``."""

    def __init__(self, risk: Callable[[object], float]):
        self.risk = risk

    def rollout_unsafe(self, state, first_actions, policy, horizon, n, noise_std, generator):
        p = torch.tensor([float(self.risk(a)) for a in first_actions], dtype=torch.float64)
        return (torch.rand(len(first_actions), n, generator=generator, dtype=torch.float64)
                < p[:, None]).numpy()


def _no_policy(*_):
    raise AssertionError("the mock model never calls the policy")


def estimator_mean(p: float, total_samples: int = 100_000, samples_per_call: int = 20,
                   seed: int = 0) -> float:
    """Mean of repeated risk estimates on a mock with per-trajectory risk ``p``."""
    if total_samples % samples_per_call:
        raise ValueError("total_samples must be a multiple of samples_per_call")
    cfg = ShieldConfig(samples=samples_per_call)
    g = torch.Generator().manual_seed(seed)
    model = BernoulliRiskModel(lambda a: p)
    calls = total_samples // samples_per_call
    return float(np.mean([estimate_violation_probability(model, None, 0, _no_policy, cfg, g)
                          for _ in range(calls)]))


@dataclass
class ShieldReport:
    results: list  # (name, ok, detail)

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.results)


def shield_checks(seed: int = 0) -> ShieldReport:
    """Case law of the latent filter against mocks, plus estimator accuracy."""
    cfg = ShieldConfig(horizon=2, samples=20, epsilon=0.15)
    g = torch.Generator().manual_seed(seed)
    out = []

    d = abps_filter(BernoulliRiskModel(lambda a: 0.0), None, 2, _no_policy, cfg, g)
    out.append(("accepts safe proposal", d.action == 2 and not d.interfered, f"chose {d.action}"))

    d = abps_filter(BernoulliRiskModel(lambda a: 0.0 if a == 3 else 1.0), None, 0, _no_policy, cfg, g)
    out.append(("substitutes the safe candidate", d.action == 3 and d.interfered, f"chose {d.action}"))

    picks = {abps_filter(BernoulliRiskModel(lambda a: 1.0), None, 0, _no_policy, cfg, g).action
             for _ in range(60)}
    out.append(("random fallback over the other actions", picks == {1, 2, 3, 4}, f"picked {sorted(picks)}"))

    for p in (0.1, 0.3, 0.5):
        m = estimator_mean(p, 20_000, seed=seed)
        out.append((f"estimator mean at p={p}", abs(m - p) <= 0.01, f"{m:.4f}"))
    return ShieldReport(out)
