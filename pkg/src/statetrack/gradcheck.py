"""Finite-difference verification of the analytic gradients: central
differences at double precision against the hand-chained backward pass, a few
entries sampled from every parameter group."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import Box
from .model import Model, ModelConfig, TrainingSample, flatten_params


def random_sample(cfg: ModelConfig, rng: np.random.Generator) -> TrainingSample:
    k = cfg.n_templates
    templates = rng.uniform(0, 1, (k, cfg.image_channels,
                                   cfg.template_size, cfg.template_size))
    t_boxes = [Box(float(rng.uniform(10, cfg.template_size - 10)),
                   float(rng.uniform(10, cfg.template_size - 10)),
                   float(rng.uniform(6, cfg.template_size // 2)),
                   float(rng.uniform(6, cfg.template_size // 2)))
               for _ in range(k)]
    search = rng.uniform(0, 1, (cfg.image_channels,
                                cfg.search_size, cfg.search_size))
    gt = Box(float(rng.uniform(12, cfg.search_size - 12)),
             float(rng.uniform(12, cfg.search_size - 12)),
             float(rng.uniform(8, cfg.search_size // 3)),
             float(rng.uniform(8, cfg.search_size // 3)))
    return TrainingSample(templates, t_boxes, search, gt)


@dataclass
class GradReport:
    group_errors: dict[str, float]  # worst relative error per parameter group
    max_rel_err: float
    threshold: float
    seeds: int
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def lines(self) -> list[str]:
        out = [f"gradient check: {self.seeds} seeds, threshold {self.threshold:g}"]
        worst = sorted(self.group_errors.items(), key=lambda kv: -kv[1])[:8]
        for name, err in worst:
            out.append(f"  {name:<28s} max rel err {err:.3e}")
        if self.skipped_kinks:
            out.append(f"  skipped {self.skipped_kinks} entries straddling "
                       "non-differentiable points")
        status = "PASS" if self.passed else "FAIL"
        out.append(f"  overall max rel err {self.max_rel_err:.3e}  [{status}]")
        return out


def check_model_gradients(cfg: ModelConfig, n_seeds: int = 20,
                          entries_per_group: int = 2,
                          threshold: float = 1e-4,
                          mutate=None, base_seed: int = 7000) -> GradReport:
    """Build a double-precision model per seed and compare analytic gradients
    with central finite differences on sampled entries of every group.

    ``mutate(grads)`` post-processes the analytic gradients before the
    comparison; injecting a fault there must make the report fail, which is
    how the check itself is tested.

    The loss is piecewise smooth (ReLU, GIoU corner selections, the l1 sign);
    central differences straddling a kink estimate an average of the two
    slopes rather than the derivative at the point.  Entries whose forward
    and backward one-sided quotients disagree are straddling one, and are
    counted and skipped rather than compared.
    """
    group_errors: dict[str, float] = {}
    skipped = 0
    for s in range(n_seeds):
        rng = np.random.default_rng(base_seed + s)
        model = Model(cfg, rng=rng, dtype=np.float64)
        sample = random_sample(cfg, rng)
        flat = flatten_params(model.params)

        def loss() -> float:
            b, _ = model.batch_loss_and_grads([sample])
            return b.total

        _, grads = model.batch_loss_and_grads([sample])
        if mutate is not None:
            mutate(grads)
        f_center = loss()
        pick = np.random.default_rng(base_seed + 9999 + s)
        for name, arr in flat.items():
            count = min(entries_per_group, arr.size)
            for flat_idx in pick.choice(arr.size, count, replace=False):
                idx = np.unravel_index(int(flat_idx), arr.shape)
                orig = arr[idx]
                # 1e-4 keeps the difference quotient above float64 roundoff
                # even for the smallest gradients; kinks are detected below
                eps = 1e-4 * max(1.0, abs(float(orig)))
                arr[idx] = orig + eps
                f_plus = loss()
                arr[idx] = orig - eps
                f_minus = loss()
                arr[idx] = orig
                q_fwd = (f_plus - f_center) / eps
                q_bwd = (f_center - f_minus) / eps
                if abs(q_fwd - q_bwd) / max(abs(q_fwd), abs(q_bwd), 1e-6) > 5e-4:
                    skipped += 1
                    continue
                num = (f_plus - f_minus) / (2 * eps)
                ana = float(grads[name][idx])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                group_errors[name] = max(group_errors.get(name, 0.0), err)
    worst = max(group_errors.values()) if group_errors else 0.0
    return GradReport(group_errors, worst, threshold, n_seeds, skipped)
