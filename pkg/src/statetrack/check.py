"""The invariant battery behind the ``check`` subcommand: scan-vs-reference
equivalence, causality, flip involution, train/infer propagation equivalence,
gradient verification, the memory-sampling table, and the bookkeeping
invariants.  Each item returns (name, passed, detail) and prints one line.

The scalar reference scan here is deliberately re-derived from the recurrence
definition with plain loops; it shares no code with the fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .block import BlockParams, block_forward, temporal_causal_flip
from .gradcheck import check_model_gradients
from .head import Box
from .metrics import compute_metrics
from .model import Model, ModelConfig, backbone_forward, config_from_preset, init_params
from .scan import FrameSequence, ScanParams, segmented_scan, state_wise_delta
from .tracker import MemoryEntry, evict, sample_memory_indices


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _reference_scan(tokens, lengths, h0, p: ScanParams):
    length, d_ch = tokens.shape
    n_st = p.n
    h = np.array(h0, dtype=np.float64)
    y = np.zeros((length, d_ch))
    t = 0
    for lf in lengths:
        for _ in range(lf):
            x = np.asarray(tokens[t], dtype=np.float64)
            b_t = p.w_b.astype(np.float64) @ x
            c_t = p.w_c.astype(np.float64) @ x
            dc = p.w_dc.astype(np.float64) @ x + p.d_bias
            ds = p.w_ds.astype(np.float64) @ x
            for di in range(d_ch):
                acc = 0.0
                for n in range(n_st):
                    z = dc[di] if p.delta_mode == "channel_only" else dc[di] + ds[n]
                    delta = max(z, 0.0) + math.log1p(math.exp(-abs(z)))
                    h[di, n] = (math.exp(delta * p.a[di, n]) * h[di, n]
                                + delta * b_t[n] * x[di])
                    acc += c_t[n] * h[di, n]
                y[t, di] = acc
            t += 1
        if p.use_interaction:
            h = (h @ p.inter_down.T.astype(np.float64)) @ p.inter_up.T.astype(np.float64)
    return y, h


def _rand_scan_params(rng, d, n, dtype=np.float64):
    p = ScanParams.init(d, n, rng, dtype=dtype)
    p.a = -np.abs(rng.uniform(0.2, 2.0, (d, n))).astype(dtype)
    return p


def check_scan_oracle(instances: int = 60, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        dtype = np.float32 if i % 2 else np.float64
        tol = 1e-5 if dtype == np.float32 else 1e-10
        d = int(rng.integers(1, 9))
        n = int(rng.choice([4, 8]))
        p = _rand_scan_params(rng, d, n, dtype)
        lengths = tuple(int(rng.integers(1, 9))
                        for _ in range(int(rng.integers(1, 5))))
        tokens = rng.normal(0, 1, (sum(lengths), d)).astype(dtype)
        h0 = rng.normal(0, 1, (d, n)).astype(dtype)
        res = segmented_scan(FrameSequence(tokens, lengths), h0, p)
        y_ref, h_ref = _reference_scan(tokens, lengths, h0, p)
        scale = max(np.max(np.abs(y_ref)), 1e-30)
        err = np.max(np.abs(res.y - y_ref)) / scale
        err_h = np.max(np.abs(res.h_last.h - h_ref)) / max(np.max(np.abs(h_ref)), 1e-30)
        worst = max(worst, err / tol, err_h / tol)
    return CheckResult("scan reference equivalence", worst < 1.0,
                       f"{instances} instances, worst err/tol {worst:.3f}")


def check_causality(instances: int = 30, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        d = int(rng.integers(3, 8))
        p = BlockParams.init(d, d, 4, 3, rng, dtype=np.float64)
        lengths = tuple(int(rng.integers(1, 6))
                        for _ in range(int(rng.integers(2, 5))))
        tokens = rng.normal(size=(sum(lengths), d))
        base, _ = block_forward(FrameSequence(tokens, lengths), None, p)
        k = int(rng.integers(1, len(lengths)))
        start = sum(lengths[:k])
        bumped = tokens.copy()
        bumped[start] += rng.normal(0, 5, d)
        out, _ = block_forward(FrameSequence(bumped, lengths), None, p)
        if not np.array_equal(out.tokens[:start], base.tokens[:start]):
            return CheckResult("cross-frame causality", False,
                               f"frame {k} perturbation leaked backwards")
    return CheckResult("cross-frame causality", True,
                       f"{instances} instances bit-exact")


def check_flip_involution(instances: int = 50, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        lengths = tuple(int(rng.integers(1, 7))
                        for _ in range(int(rng.integers(1, 6))))
        seq = FrameSequence(rng.normal(size=(sum(lengths), 3)), lengths)
        twice = temporal_causal_flip(temporal_causal_flip(seq))
        if not np.array_equal(twice.tokens, seq.tokens):
            return CheckResult("flip involution", False, "flip^2 != identity")
    return CheckResult("flip involution", True, f"{instances} instances")


def check_delta_positivity(instances: int = 50, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        d = int(rng.integers(1, 10))
        n = int(rng.choice([4, 8, 16]))
        p = _rand_scan_params(rng, d, n)
        x = rng.normal(0, 5, (7, d))
        if not np.all(state_wise_delta(x, p) > 0):
            return CheckResult("timescale positivity", False, "delta <= 0")
    return CheckResult("timescale positivity", True, f"{instances} instances")


def check_propagation_equivalence(seed: int = 4) -> CheckResult:
    cfg = config_from_preset("tiny")
    prm = init_params(cfg, np.random.default_rng(seed), dtype=np.float32)
    rng = np.random.default_rng(seed + 1)
    lt, ls, d = cfg.l_template, cfg.l_search, cfg.d_model
    for k in (1, 2, 3, 4):
        t_tok = rng.normal(size=(k, lt, d)).astype(np.float32)
        s_tok = rng.normal(size=(ls, d)).astype(np.float32)
        concat = FrameSequence(np.concatenate([t_tok.reshape(-1, d), s_tok]),
                               (lt,) * k + (ls,))
        feats_cat, _ = backbone_forward(concat, None, prm.blocks)
        states = None
        for j in range(k):
            _, states = backbone_forward(FrameSequence(t_tok[j], (lt,)),
                                         states, prm.blocks)
        feats_seed, _ = backbone_forward(FrameSequence(s_tok, (ls,)),
                                         states, prm.blocks)
        if not np.array_equal(feats_cat, feats_seed):
            return CheckResult("propagation equivalence", False,
                               f"{k} templates: bitwise mismatch")
    return CheckResult("propagation equivalence", True,
                       "1-4 templates bit-exact")


def check_gradients(seeds: int = 3, mutate=None) -> CheckResult:
    cfg = config_from_preset("tiny")
    report = check_model_gradients(cfg, n_seeds=seeds, entries_per_group=1,
                                   mutate=mutate)
    return CheckResult("gradient verification", report.passed,
                       f"{seeds} seeds, max rel err {report.max_rel_err:.3e}")


def check_sampling_formula() -> CheckResult:
    expected = [1, 6, 11, 17, 22, 28, 33, 39, 44, 50]
    got = sample_memory_indices(50, 10)
    detail = f"(50, 10) -> {got}"
    if got != expected:
        return CheckResult("memory sampling formula", False, detail)
    for m, n in ((10, 10), (1, 10), (3, 10), (50, 2)):
        idx = sample_memory_indices(m, n)
        if idx != sorted(set(idx)) or idx[0] != 1 or idx[-1] > m:
            return CheckResult("memory sampling formula", False,
                               f"({m}, {n}) -> {idx}")
    return CheckResult("memory sampling formula", True, detail)


def check_metrics_bounds(seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    for _ in range(30):
        gt = [Box(*rng.uniform(20, 80, 2), *rng.uniform(5, 20, 2))
              for _ in range(12)]
        pred = [Box(b.cx + rng.normal(0, 6), b.cy + rng.normal(0, 6),
                    b.w * rng.uniform(0.5, 1.6), b.h * rng.uniform(0.5, 1.6))
                for b in gt]
        m = compute_metrics(pred, gt)
        if not (0 <= m.ao <= 1 and m.sr75 <= m.sr50):
            return CheckResult("metrics bounds", False, f"AO {m.ao}")
    return CheckResult("metrics bounds", True, "30 random sequences")


def check_memory_invariants(seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    cap = 10
    memory = [MemoryEntry(1, [])]
    frame = 1
    for _ in range(200):
        frame += int(rng.integers(1, 9))
        memory.append(MemoryEntry(frame, []))
        if len(memory) > cap:
            evict(memory)
        idx = [e.frame_index for e in memory]
        if len(memory) > cap or idx[0] != 1 or idx != sorted(idx) \
                or len(set(idx)) != len(idx):
            return CheckResult("memory cap/eviction", False, f"state {idx}")
    return CheckResult("memory cap/eviction", True,
                       "200 scripted updates at cap 10")


def run_battery(grad_seeds: int = 3, grad_mutate=None,
                echo=print) -> list[CheckResult]:
    results = [
        check_scan_oracle(),
        check_causality(),
        check_flip_involution(),
        check_delta_positivity(),
        check_propagation_equivalence(),
        check_gradients(seeds=grad_seeds, mutate=grad_mutate),
        check_sampling_formula(),
        check_metrics_bounds(),
        check_memory_invariants(),
    ]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        echo(f"[{status}] {r.name}: {r.detail}")
    return results
