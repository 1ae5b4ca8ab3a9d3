"""FLOPs and hardware cost models.

FLOPs follow the per-block accounting used for ViTs: attention costs
``4 N C^2 + 2 N^2 C`` multiply-accumulates at the block's incoming token count
and the MLP costs ``8 N C^2`` at the count left after the block's compression.
Patch embedding and the classifier are excluded unless asked for.

The hardware side is a synthetic, deterministic surrogate of a systolic-array
accelerator.  Its coefficients live in ``cost_model.json`` and are calibrated
so that a reference ViT-S workload on the reference configuration reproduces
two published latency/power measurements.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .schedule import CompressionSchedule
from .vit import ModelConfig

# --- FLOPs ---------------------------------------------------------------------


def block_macs(n_in: int, n_out: int, dim: int) -> int:
    """MACs of one block: attention at ``n_in`` tokens, MLP at ``n_out``."""
    return 4 * n_in * dim * dim + 2 * n_in * n_in * dim + 8 * n_out * dim * dim


def stem_macs(cfg: ModelConfig) -> int:
    """Patch embedding plus classifier head, per image."""
    return (cfg.token_count - 1) * cfg.patch_dim * cfg.embed_dim + cfg.embed_dim * cfg.classes


def baseline_flops(cfg: ModelConfig, include_stem: bool = False) -> int:
    n, d = cfg.token_count, cfg.embed_dim
    total = cfg.depth * block_macs(n, n, d)
    return total + (stem_macs(cfg) if include_stem else 0)


def minimum_flops(cfg: ModelConfig, include_stem: bool = False) -> int:
    """Cost of the most aggressive schedule: only the class token survives block 1."""
    n, d = cfg.token_count, cfg.embed_dim
    total = block_macs(n, 1, d) + (cfg.depth - 1) * block_macs(1, 1, d)
    return total + (stem_macs(cfg) if include_stem else 0)


def counts_flops(counts, token_count: int, dim: int) -> int:
    """Exact MACs for the running kept counts after each block."""
    total, prev = 0, token_count
    for c in counts:
        total += block_macs(prev, c, dim)
        prev = c
    return total


def schedule_flops(schedule: CompressionSchedule, cfg: ModelConfig, include_stem: bool = False) -> int:
    if schedule.depth != cfg.depth or schedule.token_count != cfg.token_count:
        raise ValueError("schedule does not match the model config")
    total = counts_flops(schedule.effective_counts(), cfg.token_count, cfg.embed_dim)
    return total + (stem_macs(cfg) if include_stem else 0)


def running_alphas(alpha_p, alpha_m) -> list[Tensor]:
    """``a^l = max(a^{l-1}, a_p^l, a_m^l)`` with a straight-through max.

    Either list may be None (single-operation searches).
    """
    depth = len(alpha_p if alpha_p is not None else alpha_m)
    out: list[Tensor] = []
    prev = None
    for l in range(depth):
        args = [t for t in (prev,) if t is not None]
        if alpha_p is not None:
            args.append(ag.tensor(alpha_p[l]))
        if alpha_m is not None:
            args.append(ag.tensor(alpha_m[l]))
        cur = args[0] if len(args) == 1 else ag.maximum(*args, straight_through=True)
        out.append(cur)
        prev = cur
    return out


def flops(alpha_p, alpha_m, cfg: ModelConfig, include_stem: bool = False) -> Tensor:
    """Differentiable FLOPs (in MACs) of a schedule given per-block rates.

    Rates are fractions of the full token count.  A single-operation search
    passes None for the unused list.
    """
    n, c = float(cfg.token_count), float(cfg.embed_dim)
    alphas = running_alphas(alpha_p, alpha_m)
    if len(alphas) != cfg.depth:
        raise ValueError(f"{len(alphas)} block rates for a {cfg.depth}-block model")
    total = Tensor(0.0)
    n_in = Tensor(n)
    for a in alphas:
        if float(a.data) >= 1.0:
            raise ValueError("compression rate would leave no tokens")
        n_out = ag.scale(1.0 - a, n)
        attn = ag.scale(n_in, 4 * c * c) + ag.scale(ag.square(n_in), 2 * c)
        total = total + attn + ag.scale(n_out, 8 * c * c)
        n_in = n_out
    if include_stem:
        total = total + float(stem_macs(cfg))
    return total


def flops_loss(f: Tensor, target: float) -> Tensor:
    if target <= 0:
        raise ValueError("FLOPs target must be positive")
    return ag.square(ag.tensor(f) - float(target))


def hw_loss(e: Tensor, target) -> Tensor:
    """Overflow-safe ``log cosh(E - T)``."""
    return ag.log_cosh(ag.tensor(e) - ag.tensor(target))


def overhead_parameters(token_count: int, depth: int) -> int:
    """Extra learnable values of the rate search: two logit vectors per block."""
    return 2 * token_count * depth


def overhead_flops(token_count: int, depth: int) -> float:
    """Mask-machinery FLOPs: ``(N^2 + 5N) L / 2``."""
    return (token_count**2 + 5 * token_count) * depth / 2


# --- hardware space --------------------------------------------------------------

HW_DOMAINS: dict[str, tuple] = {
    "tiles_row": (1, 2, 4, 8),
    "tiles_col": (1, 2, 4, 8),
    "mesh_row": (4, 8, 16, 32),
    "mesh_col": (4, 8, 16, 32),
    "bus_width": (64, 128, 256, 512),
    "sp_banks": (1, 2, 4, 8, 16),
    "sp_mb": (0.25, 0.5, 1.0, 2.0, 4.0),
    "acc_kb": (64, 128, 256, 512, 1024),
}


@dataclass(frozen=True)
class HwConfig:
    tiles_row: int = 1
    tiles_col: int = 1
    mesh_row: int = 16
    mesh_col: int = 16
    bus_width: int = 128
    sp_banks: int = 4
    sp_mb: float = 0.25
    acc_kb: int = 64

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v not in HW_DOMAINS[f.name]:
                raise ValueError(f"{f.name}={v} outside {HW_DOMAINS[f.name]}")

    @property
    def processing_elements(self) -> int:
        return self.tiles_row * self.tiles_col * self.mesh_row * self.mesh_col

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> HwConfig:
        return cls(**{k: d[k] for k in HW_DOMAINS if k in d})

    @classmethod
    def from_indices(cls, idx, domains: dict | None = None) -> HwConfig:
        domains = domains or HW_DOMAINS
        return cls(**{k: domains[k][int(i)] for k, i in zip(HW_DOMAINS, idx)})


def all_hw_configs(domains: dict | None = None):
    domains = domains or HW_DOMAINS
    for combo in itertools.product(*(domains[k] for k in HW_DOMAINS)):
        yield HwConfig(*combo)


# --- synthetic accelerator model ----------------------------------------------


def default_cost_model_path() -> Path:
    return Path(str(resources.files("tokenrate") / "cost_model.json"))


@dataclass
class CostModel:
    """Per-block latency (ms) and power (mW) of a reference workload.

    A schedule's rates are mapped onto the reference model's token count, and
    block costs are scaled by ``ref_depth / depth`` so every model's
    uncompressed baseline lands on the reference baseline.
    """

    ref_tokens: int
    ref_dim: int
    ref_heads: int
    ref_depth: int
    anchor_hw: HwConfig
    lat_compute: float  # ms at the anchor for the reference full block
    lat_host: float  # ms, softmax on the host, quadratic in tokens
    lat_memory: float  # ms, activation traffic, linear in tokens
    lat_const: float  # ms per block
    pw_dynamic: float  # mW per block at the anchor, follows compute work
    pw_static: float  # mW per block at the anchor
    spill_penalty: float = 0.5
    domains: dict | None = None

    # -- evaluation --
    def kept_from_alpha(self, a: float) -> int:
        n = self.ref_tokens
        return int(min(max(round(n * (1.0 - a)), 1), n))

    def _shapes(self, n: int) -> tuple[float, float, float]:
        d, n0 = self.ref_dim, self.ref_tokens
        compute = (12 * n * d * d + 2 * n * n * d) / (12 * n0 * d * d + 2 * n0 * n0 * d)
        return compute, (n / n0) ** 2, n / n0

    def _spill(self, n: int, hw: HwConfig) -> float:
        # activations of int8 tokens plus int32 partial sums against on-chip capacity
        act = n * self.ref_dim * 4
        acc = n * self.ref_dim * 4 * 4
        over_sp = max(act / (hw.sp_mb * 2**20), 1.0)
        over_acc = max(acc / (hw.acc_kb * 2**10), 1.0)
        return 1.0 + self.spill_penalty * (math.log2(over_sp) + math.log2(over_acc))

    def block_latency(self, n: int, hw: HwConfig) -> float:
        a = self.anchor_hw
        compute, quad, lin = self._shapes(n)
        pe_ratio = a.processing_elements / hw.processing_elements
        bus_ratio = (a.bus_width * min(a.sp_banks, 4)) / (hw.bus_width * min(hw.sp_banks, 4))
        spill = self._spill(n, hw) / self._spill(n, a)
        return (
            self.lat_compute * compute * pe_ratio
            + self.lat_host * quad
            + self.lat_memory * lin * bus_ratio * spill
            + self.lat_const
        )

    def block_power(self, n: int, hw: HwConfig) -> float:
        a = self.anchor_hw
        compute, _, lin = self._shapes(n)
        pe = hw.processing_elements / a.processing_elements
        sram = (hw.sp_mb * 1024 + hw.acc_kb + 8 * hw.sp_banks) / (a.sp_mb * 1024 + a.acc_kb + 8 * a.sp_banks)
        bus = hw.bus_width / a.bus_width
        dynamic = self.pw_dynamic * (0.8 * compute * math.sqrt(pe) + 0.2 * lin * bus)
        static = self.pw_static * (0.5 + 0.3 * pe + 0.2 * sram)
        return dynamic + static

    def block_cost(self, a: float, hw: HwConfig, metric: str) -> float:
        """Piecewise-constant per-block cost at rate ``a`` (one schedule block)."""
        n = self.kept_from_alpha(a)
        return self.block_latency(n, hw) if metric == "latency" else self.block_power(n, hw)

    def schedule_cost(self, alphas, hw: HwConfig, metric: str = "latency") -> float:
        """Total over blocks for running rates ``alphas`` of any-depth model."""
        scale = self.ref_depth / len(alphas)
        return scale * sum(self.block_cost(float(a), hw, metric) for a in alphas)

    def schedule_metrics(self, schedule: CompressionSchedule, hw: HwConfig | None = None) -> tuple[float, float]:
        hw = hw or self.anchor_hw
        n = schedule.token_count
        alphas = [(n - c) / n for c in schedule.effective_counts()]
        return self.schedule_cost(alphas, hw, "latency"), self.schedule_cost(alphas, hw, "power")

    def counts_metrics(self, counts, hw: HwConfig | None = None) -> tuple[float, float]:
        """Latency and power of a reference-size kept-count profile."""
        hw = hw or self.anchor_hw
        scale = self.ref_depth / len(counts)
        lat = scale * sum(self.block_latency(int(c), hw) for c in counts)
        pw = scale * sum(self.block_power(int(c), hw) for c in counts)
        return lat, pw

    # -- persistence --
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["anchor_hw"] = self.anchor_hw.to_dict()
        d["domains"] = {k: list(v) for k, v in (self.domains or HW_DOMAINS).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CostModel:
        d = dict(d)
        d["anchor_hw"] = HwConfig.from_dict(d["anchor_hw"])
        doms = d.get("domains")
        d["domains"] = {k: tuple(v) for k, v in doms.items()} if doms else None
        d.pop("anchors", None)
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})

    def save(self, path, anchors: dict | None = None) -> None:
        d = self.to_dict()
        if anchors:
            d["anchors"] = anchors
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path=None) -> CostModel:
        return cls.from_dict(json.loads(Path(path or default_cost_model_path()).read_text()))


# Anchor measurements for ViT-S on the reference accelerator and the
# block-wise kept counts of the compressed schedule that produced them.
ANCHOR_BASELINE = {"latency_ms": 68.1, "power_mw": 156.0}
ANCHOR_COMPRESSED = {"latency_ms": 40.1, "power_mw": 98.0}
VIT_S_PRUNE_KEPT = [197, 196, 190, 168, 150, 139, 129, 117, 99, 78, 58, 3]
VIT_S_MERGE_KEPT = [197, 194, 176, 156, 141, 133, 121, 107, 88, 64, 56, 3]


def vit_s_reference_schedule() -> CompressionSchedule:
    return CompressionSchedule(197, VIT_S_PRUNE_KEPT, VIT_S_MERGE_KEPT)


def calibrate(
    host_share: float = 0.25,
    memory_share: float = 0.15,
    spill_penalty: float = 0.5,
) -> CostModel:
    """Solve the latency and power coefficients against the two anchors.

    ``host_share`` and ``memory_share`` fix which fraction of the uncompressed
    block latency is host softmax and memory traffic; the compute coefficient
    and the per-block constant then follow from the two anchor latencies, and
    the dynamic/static power split from the two anchor powers.
    """
    base = CostModel(197, 384, 6, 12, HwConfig(), 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, spill_penalty)
    counts = vit_s_reference_schedule().effective_counts()
    sh = [base._shapes(n) for n in counts]
    depth = len(counts)
    comp_r = sum(s[0] for s in sh) / depth
    quad_r = sum(s[1] for s in sh) / depth
    lin_r = sum(s[2] for s in sh) / depth
    lat0 = ANCHOR_BASELINE["latency_ms"] / depth
    lat1 = ANCHOR_COMPRESSED["latency_ms"] / depth
    host, mem = host_share * lat0, memory_share * lat0
    # compute + const = lat0 - host - mem ; compute*comp_r + const = lat1 - host*quad_r - mem*lin_r
    a = np.array([[1.0, 1.0], [comp_r, 1.0]])
    rhs = np.array([lat0 - host - mem, lat1 - host * quad_r - mem * lin_r])
    compute, const = np.linalg.solve(a, rhs)
    # power: dynamic share follows 0.8*compute + 0.2*linear shape at the anchor hw
    pw0 = ANCHOR_BASELINE["power_mw"] / depth
    pw1 = ANCHOR_COMPRESSED["power_mw"] / depth
    dyn_r = 0.8 * comp_r + 0.2 * lin_r
    dynamic, static = np.linalg.solve(np.array([[1.0, 1.0], [dyn_r, 1.0]]), np.array([pw0, pw1]))
    if min(compute, const, dynamic, static) <= 0:
        raise ValueError("calibration produced a non-positive coefficient")
    return replace(
        base,
        lat_compute=float(compute),
        lat_host=float(host),
        lat_memory=float(mem),
        lat_const=float(const),
        pw_dynamic=float(dynamic),
        pw_static=float(static),
    )


# --- differentiable hardware expectations ------------------------------------------


def expected_hw_alpha(alphas, hw: HwConfig, cm: CostModel, metric: str = "latency") -> Tensor:
    """``sum_l (a^l + SG(1 - a^l)) F'(a^l, hw)`` for fixed hardware.

    The value is the plain block-cost sum; the gradient with respect to each
    running rate equals that block's (scaled) cost.
    """
    scale = cm.ref_depth / len(alphas)
    total = Tensor(0.0)
    for a in alphas:
        a = ag.tensor(a)
        cost = scale * cm.block_cost(float(a.data), hw, metric)
        unit = a + ag.stop_gradient(1.0 - a)
        total = total + ag.scale(unit, cost)
    return total


def expected_hw_kept(alphas, hw: HwConfig, cm: CostModel, metric: str = "latency") -> Tensor:
    """Same value as ``expected_hw_alpha`` with the gradient routed through the
    kept fraction ``1 - a^l``: ``sum_l ((1 - a^l) + SG(a^l)) F'(a^l, hw)``.

    The gradient with respect to each running rate is minus that block's cost,
    so a cost above target pushes towards more compression.
    """
    scale = cm.ref_depth / len(alphas)
    total = Tensor(0.0)
    for a in alphas:
        a = ag.tensor(a)
        cost = scale * cm.block_cost(float(a.data), hw, metric)
        unit = (1.0 - a) + ag.stop_gradient(a)
        total = total + ag.scale(unit, cost)
    return total


@dataclass
class HwSearchParam:
    """Logits over every hardware dimension's candidate values."""

    logits: dict[str, Tensor]
    tau: float = 1.0
    domains: dict | None = None

    @classmethod
    def uniform(cls, domains: dict | None = None, tau: float = 1.0) -> HwSearchParam:
        domains = domains or HW_DOMAINS
        return cls({k: Tensor(np.zeros(len(domains[k])), requires_grad=True) for k in HW_DOMAINS}, tau, domains)

    def doms(self) -> dict:
        return self.domains or HW_DOMAINS

    def argmax_config(self) -> HwConfig:
        return HwConfig.from_indices([int(np.argmax(self.logits[k].data)) for k in HW_DOMAINS], self.doms())

    def probabilities(self) -> dict[str, np.ndarray]:
        out = {}
        for k, t in self.logits.items():
            z = np.exp(t.data - t.data.max())
            out[k] = z / z.sum()
        return out


def gumbel_softmax(logits: Tensor, tau: float, rng: np.random.Generator) -> Tensor:
    g = -np.log(-np.log(rng.uniform(1e-12, 1.0, size=logits.shape)))
    return ag.softmax(ag.scale(logits + Tensor(g), 1.0 / tau))


def _sample_hw(alphas, hsp: HwSearchParam, cm: CostModel, rng: np.random.Generator, metric: str):
    """Sample a configuration and cost every single-dimension alternative to it.

    Returns ``(betas, picks, hw, costs)`` where ``costs[h][o]`` is the cost of
    the sampled configuration with dimension ``h`` switched to option ``o``.
    """
    doms = hsp.doms()
    alphas = [float(ag.tensor(a).data) for a in alphas]
    betas, picks = [], []
    for k in HW_DOMAINS:
        beta = gumbel_softmax(hsp.logits[k], hsp.tau, rng)
        betas.append(beta)
        picks.append(int(np.argmax(beta.data)))
    hw = HwConfig.from_indices(picks, doms)
    sampled = cm.schedule_cost(alphas, hw, metric)
    costs = []
    for h, k in enumerate(HW_DOMAINS):
        row = np.empty(len(doms[k]))
        for o in range(len(row)):
            if o == picks[h]:
                row[o] = sampled
            else:
                alt = list(picks)
                alt[h] = o
                row[o] = cm.schedule_cost(alphas, HwConfig.from_indices(alt, doms), metric)
        costs.append(row)
    return betas, picks, hw, costs


def _straight_through(beta: Tensor, pick: int) -> Tensor:
    onehot = np.zeros(beta.shape)
    onehot[pick] = 1.0
    return beta + ag.stop_gradient(Tensor(onehot) - beta)


def expected_hw_beta(
    alphas,
    hsp: HwSearchParam,
    cm: CostModel,
    rng: np.random.Generator,
    metric: str = "latency",
    form: str = "per_option",
) -> tuple[Tensor, HwConfig]:
    """Straight-through Gumbel-Softmax estimate of the hardware cost.

    One configuration is sampled (the argmax of each dimension's relaxed
    weights ``b_h``).  The value is always ``H`` times its cost.

    ``form="literal"`` weights the sampled cost by ``b_h[c] + SG(1 - b_h[c])``
    for each dimension, so only the sampled option's weight carries gradient.
    That estimate reinforces any sample below the target and never pulls back
    up, which drives the search to the fastest corner of the space.

    ``form="per_option"`` (default) expands each dimension over its options,
    ``sum_o (b_h[o] + SG(onehot[o] - b_h[o])) F'(alpha, sample with h = o)``.
    The value is unchanged, and the gradient moves probability towards cheaper
    options when over target and towards costlier ones when under.
    """
    if form not in ("per_option", "literal"):
        raise ValueError(f"unknown estimator form {form!r}")
    betas, picks, hw, costs = _sample_hw(alphas, hsp, cm, rng, metric)
    total = Tensor(0.0)
    for beta, c, row in zip(betas, picks, costs):
        if form == "literal":
            w = beta[c]
            total = total + ag.scale(w + ag.stop_gradient(1.0 - w), float(row[c]))
        else:
            total = total + ag.sum_(_straight_through(beta, c) * Tensor(row))
    return total, hw


def hw_beta_loss(
    alphas,
    hsp: HwSearchParam,
    cm: CostModel,
    rng: np.random.Generator,
    target: float,
    metric: str = "latency",
) -> tuple[Tensor, HwConfig]:
    """Per-option hardware loss with the value of ``hw_loss(E, H*T)``.

    Each dimension's straight-through weights multiply the loss each of its
    options would incur with the other dimensions at their sampled values.
    The gradient then favours, per dimension, the options that bring the cost
    closest to the target, so the logits concentrate and their argmax is a
    configuration near the target rather than a random corner of a spread-out
    distribution.
    """
    betas, picks, hw, costs = _sample_hw(alphas, hsp, cm, rng, metric)
    h = len(betas)
    total = Tensor(0.0)
    for beta, c, row in zip(betas, picks, costs):
        x = h * (row - target)
        losses = np.abs(x) + np.log1p(np.exp(-2.0 * np.abs(x))) - np.log(2.0)
        total = total + ag.scale(ag.sum_(_straight_through(beta, c) * Tensor(losses)), 1.0 / h)
    return total, hw
