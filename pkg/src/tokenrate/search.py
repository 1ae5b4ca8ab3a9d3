"""Differentiable compression-rate search, hardware co-search and oracles.

During search the token axis never shrinks.  Each block sorts its tokens by
importance and physically reorders them, so row ``k`` holds the rank-``k``
token and every mask is a rank-space vector shared by the batch.  Dropped
tokens stay in the sequence but are excluded from everyone else's attention
through the attention mask; merge destinations are updated in place so the
kept rows match what the apply path computes on the shortened sequence.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import cost
from .autograd import Tensor
from .optim import AdamW, cosine_lr
from .proxy import MERGE, PRUNE, RateParam, combine_masks, kept_count
from .schedule import CompressionSchedule, config_hash, random_schedule
from .tokens import OPTIONS, ScheduleCompressor, compress_block, cosine_matrix, sort_tokens
from .vit import (
    AttentionState,
    ModelConfig,
    as_tensors,
    block_forward,
    block_params,
    classify,
    cross_entropy,
    model_forward,
    patch_embed,
)


@dataclass
class SearchConfig:
    target_flops: float | None = None  # MACs; overrides target_fraction
    target_fraction: float = 0.5  # of baseline blocks-only FLOPs
    target_latency: float | None = None  # ms
    target_power: float | None = None  # mW
    lambda_f: float = 5.0
    lambda_la: float = 1.0
    lambda_pw: float = 1.0
    lambda_cls: float = 1.0  # 0 gives the constraint-only diagnostic mode
    flops_unit: float | None = None  # MACs per loss unit; None = baseline / 10
    epochs: int = 3
    lr: float = 0.01
    min_lr: float = 0.001
    weight_decay: float = 0.0
    batch_size: int = 64
    warmup: bool = False  # lambda_f = 0 during the first epoch
    seed: int = 0
    option: str = "prune_merge"
    metric: str = "class_attn"
    hw_surrogate: str = "kept"  # or "literal", see cost.expected_hw_alpha
    hw_estimator: str = "expected_loss"  # or "per_option" / "literal", see cost.expected_hw_beta
    hw_rounds: int = 3
    hw_steps: int = 400
    hw_lr: float = 0.1
    tau: float = 1.0
    tau_final: float | None = None  # anneal geometrically to this within each hardware phase

    def __post_init__(self):
        if self.option not in OPTIONS:
            raise ValueError(f"unknown compression option {self.option!r}")
        for name in ("lambda_f", "lambda_la", "lambda_pw", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")

    def resolve_target(self, cfg: ModelConfig) -> float:
        if self.target_flops is not None:
            return float(self.target_flops)
        return self.target_fraction * cost.baseline_flops(cfg)

    def resolve_unit(self, cfg: ModelConfig) -> float:
        return float(self.flops_unit) if self.flops_unit else cost.baseline_flops(cfg) / 10.0

    def to_dict(self) -> dict:
        return asdict(self)


class InfeasibleTarget(ValueError):
    def __init__(self, target: float, minimum: float):
        super().__init__(f"FLOPs target {target:.6g} is below the minimum achievable {minimum:.6g}")
        self.target = target
        self.minimum = minimum


# --- search-mode compression ---------------------------------------------------


class SearchCompressor:
    """Masks tokens block by block from learnable rate parameters."""

    def __init__(self, rates: dict[str, RateParam], cfg: ModelConfig, option: str = "prune_merge",
                 metric: str = "class_attn", seed: int = 0):
        self.rates = rates
        self.cfg = cfg
        self.option = option
        self.metric = metric
        self.seed = seed
        self.reset()

    def reset(self) -> None:
        self.m_prev: Tensor | None = None
        self.alpha_p: list[Tensor] = []
        self.alpha_m: list[Tensor] = []
        self.masks: list[dict[str, Tensor]] = []
        self.rng = np.random.default_rng(self.seed)

    def attention_mask(self) -> Tensor | None:
        return self.m_prev

    def _role_mask(self, role: str, block: int) -> Tensor | None:
        rp = self.rates.get(f"{role}.{block}")
        if rp is None:
            return None
        a, pi, m = rp.evaluate()
        (self.alpha_p if role == PRUNE else self.alpha_m).append(a)
        self.masks[-1][role] = m
        self.masks[-1][role + "_pi"] = pi
        return m

    def __call__(self, block: int, xhat: Tensor, state: AttentionState) -> Tensor:
        b, n, d = xhat.shape
        order = sort_tokens(state.importance(self.metric, self.rng)).order
        xs = ag.gather_rows(xhat, order)
        self.masks.append({"order": order})
        prev = self.m_prev if self.m_prev is not None else Tensor(np.ones(n))
        mp = self._role_mask(PRUNE, block)
        mm = self._role_mask(MERGE, block)
        ones = Tensor(np.ones(n))
        mp = ones if mp is None else mp
        mm = ones if mm is None else mm
        if self.option == "merge_prune":
            # merge among the previously kept tokens, then prune the survivors
            sources = prev * (1.0 - mm)
            n_dest = kept_count((prev * mm).data)
        else:
            sources = prev * mp * (1.0 - mm)
            n_dest = kept_count((prev * mp * mm).data)
        m_new = combine_masks(prev, mp, mm)
        xs = merge_masked(xs, sources, n_dest)
        self.masks[-1]["m"] = m_new
        self.m_prev = m_new
        return xs

    def running_alphas(self) -> list[Tensor]:
        ap = self.alpha_p if self.alpha_p else None
        am = self.alpha_m if self.alpha_m else None
        return cost.running_alphas(ap, am)

    def hard_schedule(self) -> CompressionSchedule:
        n, depth = self.cfg.token_count, self.cfg.depth
        kp, km = [n] * depth, [n] * depth
        for l in range(depth):
            if f"{PRUNE}.{l}" in self.rates:
                kp[l] = kept_count(self.masks[l][PRUNE].data)
            if f"{MERGE}.{l}" in self.rates:
                km[l] = kept_count(self.masks[l][MERGE].data)
        return CompressionSchedule(n, kp, km)


def merge_masked(xs: Tensor, sources: Tensor, n_dest: int) -> Tensor:
    """Average each source row (weight 1 in ``sources``) into its best destination.

    Destinations are ranks ``1..n_dest-1``.  The update
    ``x_d <- (x_d + sum_s w_s x_s) / (1 + sum_s w_s)`` equals the plain mean
    when the weights are hard 0/1 and carries gradient to the masks.
    """
    b, n, d = xs.shape
    src = np.flatnonzero(sources.data > 0.5)
    if src.size == 0 or n_dest < 2:
        return xs
    sim = cosine_matrix(xs.data[:, src, :], xs.data[:, 1:n_dest, :])
    dest = sim.argmax(axis=-1) + 1
    assign = np.zeros((b, n, n))
    assign[np.arange(b)[:, None], dest, src[None, :]] = 1.0
    weights = Tensor(assign) * ag.broadcast_to(sources, (b, n, n))
    num = xs + weights @ xs
    den = 1.0 + ag.sum_(weights, axis=2)
    return num / ag.broadcast_to(ag.reshape(den, (b, n, 1)), (b, n, d))


# --- losses ---------------------------------------------------------------------


def total_loss(l_cls: Tensor, l_f: Tensor | None = None, scfg: SearchConfig | None = None,
               l_la: Tensor | None = None, l_pw: Tensor | None = None, lambda_f: float | None = None) -> Tensor:
    scfg = scfg or SearchConfig()
    lf = scfg.lambda_f if lambda_f is None else lambda_f
    total = ag.scale(l_cls, scfg.lambda_cls)
    if l_f is not None and lf:
        total = total + ag.scale(l_f, lf)
    if l_la is not None and scfg.lambda_la:
        total = total + ag.scale(l_la, scfg.lambda_la)
    if l_pw is not None and scfg.lambda_pw:
        total = total + ag.scale(l_pw, scfg.lambda_pw)
    return total


def make_rates(cfg: ModelConfig, option: str) -> dict[str, RateParam]:
    roles = {"prune": [PRUNE], "merge": [MERGE]}.get(option, [PRUNE, MERGE])
    rates = {}
    for l in range(cfg.depth):
        for role in roles:
            rp = RateParam(cfg.token_count, role, l)
            rates[rp.name] = rp
    return rates


def hw_expectation(alphas, hw, cm, metric: str, surrogate: str) -> Tensor:
    if surrogate == "literal":
        return cost.expected_hw_alpha(alphas, hw, cm, metric)
    if surrogate == "kept":
        return cost.expected_hw_kept(alphas, hw, cm, metric)
    raise ValueError(f"unknown hardware surrogate {surrogate!r}")


# --- trace ------------------------------------------------------------------------

TRACE_FIELDS = ("step", "epoch", "lr", "L_cls", "L_f", "L_la", "L_pw", "F", "F_expected", "latency", "power", "kept")


@dataclass
class SearchTrace:
    rows: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in self.rows:
            vals = []
            for k in TRACE_FIELDS:
                v = r.get(k, "")
                if k == "kept":
                    v = " ".join(str(c) for c in v)
                elif isinstance(v, float):
                    v = repr(v)
                vals.append(v)
            w.writerow(vals)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> SearchTrace:
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                row = {}
                for k, v in r.items():
                    if k == "kept":
                        row[k] = [int(c) for c in v.split()]
                    elif k in ("step", "epoch", "F"):
                        row[k] = int(v)
                    else:
                        row[k] = float(v) if v != "" else None
                rows.append(row)
        return cls(rows)


@dataclass
class SearchResult:
    schedule: CompressionSchedule
    trace: SearchTrace
    rates: dict[str, RateParam]
    flops: int
    hw: cost.HwConfig | None = None
    hw_param: cost.HwSearchParam | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def check_target(target: float, cfg: ModelConfig) -> None:
    lo = cost.minimum_flops(cfg)
    if target < lo:
        raise InfeasibleTarget(target, lo)


def search_rates(
    params,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    scfg: SearchConfig | None = None,
    cm: cost.CostModel | None = None,
    hw: cost.HwConfig | None = None,
    rates: dict[str, RateParam] | None = None,
    trace: SearchTrace | None = None,
    epochs: int | None = None,
    epoch_offset: int = 0,
) -> SearchResult:
    """Optimise rate logits on a frozen backbone; returns the hard schedule.

    Latency/power terms are added when ``cm`` and the matching targets are
    given (``hw`` defaults to the cost model's anchor configuration).
    """
    scfg = scfg or SearchConfig()
    if len(images) == 0:
        raise ValueError("search needs a non-empty dataset")
    target = scfg.resolve_target(cfg)
    check_target(target, cfg)
    unit = scfg.resolve_unit(cfg)
    frozen = as_tensors(params, requires_grad=False)
    rates = rates if rates is not None else make_rates(cfg, scfg.option)
    epochs = scfg.epochs if epochs is None else epochs
    opt = AdamW({k: rp.logits for k, rp in rates.items()}, lr=scfg.lr, weight_decay=scfg.weight_decay)
    comp = SearchCompressor(rates, cfg, scfg.option, scfg.metric, scfg.seed)
    trace = trace if trace is not None else SearchTrace()
    if cm is not None and hw is None:
        hw = cm.anchor_hw
    steps_per_epoch = -(-len(images) // scfg.batch_size)
    total_steps = max(epochs * steps_per_epoch, 1)
    step = 0
    start = time.perf_counter()
    last_feasible: CompressionSchedule | None = None
    for ep in range(epochs):
        rng = np.random.default_rng([scfg.seed, epoch_offset + ep])
        lam_f = 0.0 if (scfg.warmup and ep + epoch_offset == 0) else scfg.lambda_f
        for idx in _batches(len(images), scfg.batch_size, rng):
            lr = cosine_lr(step, total_steps, scfg.lr, scfg.min_lr)
            comp.seed = scfg.seed + epoch_offset * 100003 + step
            res = model_forward(images[idx], frozen, cfg, comp)
            l_cls = cross_entropy(res.logits, labels[idx])
            alphas = comp.running_alphas()
            f_soft = cost.flops(comp.alpha_p or None, comp.alpha_m or None, cfg)
            l_f = cost.flops_loss(ag.scale(f_soft, 1.0 / unit), target / unit)
            l_la = l_pw = None
            if cm is not None and scfg.target_latency is not None:
                l_la = cost.hw_loss(hw_expectation(alphas, hw, cm, "latency", scfg.hw_surrogate), scfg.target_latency)
            if cm is not None and scfg.target_power is not None:
                l_pw = cost.hw_loss(hw_expectation(alphas, hw, cm, "power", scfg.hw_surrogate), scfg.target_power)
            loss = total_loss(l_cls, l_f, scfg, l_la, l_pw, lambda_f=lam_f)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            sched = comp.hard_schedule()
            f_hard = cost.schedule_flops(sched, cfg)
            row = dict(
                step=len(trace),
                epoch=epoch_offset + ep,
                lr=lr,
                L_cls=float(l_cls.data),
                L_f=float(l_f.data),
                L_la=float(l_la.data) if l_la is not None else None,
                L_pw=float(l_pw.data) if l_pw is not None else None,
                F=f_hard,
                F_expected=float(f_soft.data),
                kept=sched.effective_counts(),
            )
            if cm is not None:
                row["latency"], row["power"] = cm.schedule_metrics(sched, hw)
            trace.append(**row)
            if f_hard <= target and ep == epochs - 1:
                last_feasible = sched
            step += 1
    trace.wall_seconds += time.perf_counter() - start
    final = final_schedule(rates, cfg, scfg)
    f_final = cost.schedule_flops(final, cfg)
    if f_final > target and last_feasible is not None:
        final = last_feasible
    final.provenance = {
        "search_config_hash": config_hash(scfg.to_dict()),
        "seed": scfg.seed,
        "achieved_flops": cost.schedule_flops(final, cfg),
        "target_flops": target,
        "option": scfg.option,
        "metric": scfg.metric,
    }
    final.model = cfg.to_dict()
    return SearchResult(final, trace, rates, cost.schedule_flops(final, cfg), hw)


def final_schedule(rates: dict[str, RateParam], cfg: ModelConfig, scfg: SearchConfig) -> CompressionSchedule:
    """Hard kept counts of the current logits."""
    n = cfg.token_count
    kp, km = [n] * cfg.depth, [n] * cfg.depth
    for rp in rates.values():
        (kp if rp.role == PRUNE else km)[rp.block] = rp.hard_kept()
    return CompressionSchedule(n, kp, km)


# --- hardware co-search -------------------------------------------------------------


def hw_phase(
    schedule: CompressionSchedule,
    hsp: cost.HwSearchParam,
    cm,
    scfg: SearchConfig,
    rng: np.random.Generator,
    steps: int | None = None,
) -> list[dict]:
    """Optimise hardware logits with the schedule fixed."""
    n = schedule.token_count
    alphas = [(n - c) / n for c in schedule.effective_counts()]
    opt = AdamW(dict(hsp.logits), lr=scfg.hw_lr)
    log = []
    steps = scfg.hw_steps if steps is None else steps
    tau0 = hsp.tau
    for i in range(steps):
        if scfg.tau_final is not None:
            hsp.tau = tau0 * (scfg.tau_final / tau0) ** (i / max(steps - 1, 1))
        terms = []
        picked = None
        for metric, t, lam in (("latency", scfg.target_latency, scfg.lambda_la), ("power", scfg.target_power, scfg.lambda_pw)):
            if t is None:
                continue
            if scfg.hw_estimator == "expected_loss":
                l_hw, picked = cost.hw_beta_loss(alphas, hsp, cm, rng, t, metric)
            else:
                e, picked = cost.expected_hw_beta(alphas, hsp, cm, rng, metric, scfg.hw_estimator)
                l_hw = cost.hw_loss(e, len(cost.HW_DOMAINS) * t)
            terms.append(ag.scale(l_hw, lam))
        if not terms:
            break
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"loss": float(loss.data), "hw": picked, "tau": hsp.tau})
    hsp.tau = tau0
    return log


def cosearch_hw(
    params,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    scfg: SearchConfig,
    cm,
    hsp: cost.HwSearchParam | None = None,
) -> SearchResult:
    """Alternate rate phases (hardware fixed) and hardware phases (rates fixed).

    The rate epochs are spread over ``hw_rounds`` rounds.  Each round
    optimises the rates on the current hardware and then the hardware logits
    on the resulting schedule, so the returned configuration is tuned to the
    returned schedule.  The first rate phase uses the cost model's anchor
    configuration.
    """
    hsp = hsp or cost.HwSearchParam.uniform(getattr(cm, "domains", None), scfg.tau)
    rng = np.random.default_rng([scfg.seed, 7])
    rates = make_rates(cfg, scfg.option)
    trace = SearchTrace()
    rounds = max(min(scfg.hw_rounds, scfg.epochs), 1)
    per_round = [scfg.epochs // rounds] * rounds
    for i in range(scfg.epochs % rounds):
        per_round[-1 - i] += 1
    hw = getattr(cm, "anchor_hw", None) or hsp.argmax_config()
    offset = 0
    result = None
    for r in range(rounds):
        result = search_rates(params, images, labels, cfg, scfg, cm, hw, rates, trace, per_round[r], offset)
        offset += per_round[r]
        hw_phase(result.schedule, hsp, cm, scfg, rng)
        hw = hsp.argmax_config()
    assert result is not None
    result.hw = hw
    result.hw_param = hsp
    result.schedule.provenance["hw"] = hw.to_dict()
    return result


# --- oracle enumeration ---------------------------------------------------------------


@dataclass
class ScheduleScore:
    schedule: CompressionSchedule
    flops: int
    accuracy: float


def evaluate_schedules(
    params,
    cfg: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    schedules: list[CompressionSchedule],
    option: str = "prune_merge",
    metric: str = "class_attn",
    batch_size: int = 1000,
) -> list[float]:
    """Off-the-shelf accuracy of every schedule.

    Schedules are visited in lexicographic order of their per-block kept
    counts, so work shared by a common prefix of blocks is computed once.
    """
    p = as_tensors(params)
    labels = np.asarray(labels)
    acc = np.zeros(len(schedules))
    keys = [tuple(x for pair in zip(s.prune_kept, s.merge_kept) for x in pair) for s in schedules]
    order = sorted(range(len(schedules)), key=lambda i: keys[i])
    with ag.no_grad():
        for lo in range(0, len(images), batch_size):
            imgs = images[lo : lo + batch_size]
            lab = labels[lo : lo + batch_size]
            x0 = patch_embed(imgs, p, cfg)
            stack: list[Tensor] = [x0]
            prev_key: tuple = ()
            for i in order:
                key = keys[i]
                common = 0
                while common < cfg.depth and key[: 2 * common + 2] == prev_key[: 2 * common + 2]:
                    common += 1
                del stack[common + 1 :]
                s = schedules[i]
                x = stack[-1]
                for l in range(common, cfg.depth):
                    rng = np.random.default_rng([l, i])

                    def hook(xh, st, _l=l, _rng=rng):
                        out, _ = compress_block(xh, st, s.prune_kept[_l], s.merge_kept[_l], option, metric, _rng)
                        return out

                    x, _ = block_forward(x, block_params(p, l), cfg.heads, None, hook)
                    stack.append(x)
                pred = classify(x, p).data.argmax(axis=1)
                acc[i] += float((pred == lab).sum())
                prev_key = key
    return [float(a) for a in acc / max(len(images), 1)]


def schedule_grid(cfg: ModelConfig, kept_choices, option: str = "prune") -> list[CompressionSchedule]:
    """Every combination of per-block kept counts from ``kept_choices``.

    The grid is over the effective kept count of each block, stored on the
    operation named by ``option`` (both rows for the two-stage options).
    """
    import itertools

    n = cfg.token_count
    out = []
    for combo in itertools.product(*([list(kept_choices)] * cfg.depth)):
        if option == "merge":
            out.append(CompressionSchedule(n, [n] * cfg.depth, combo))
        elif option == "prune":
            out.append(CompressionSchedule(n, combo, [n] * cfg.depth))
        else:
            out.append(CompressionSchedule(n, combo, combo))
    return out


@dataclass
class EnumerationResult:
    scores: list[ScheduleScore]
    pareto: list[ScheduleScore]
    best: ScheduleScore | None
    partial: bool
    draws: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["flops", "accuracy", "pareto", "prune_kept", "merge_kept"])
        pset = {id(s) for s in self.pareto}
        for s in self.scores:
            w.writerow([s.flops, repr(s.accuracy), int(id(s) in pset),
                        " ".join(map(str, s.schedule.prune_kept)), " ".join(map(str, s.schedule.merge_kept))])
        return buf.getvalue()


def pareto_front(scores: list[ScheduleScore]) -> list[ScheduleScore]:
    """Schedules not beaten by another with fewer-or-equal FLOPs and higher accuracy."""
    front = []
    best = -1.0
    for s in sorted(scores, key=lambda s: (s.flops, -s.accuracy)):
        if s.accuracy > best:
            front.append(s)
            best = s.accuracy
    return front


def enumerate_schedules(
    params,
    cfg: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    target: float,
    schedules: list[CompressionSchedule] | None = None,
    samples: int | None = None,
    seed: int = 0,
    option: str = "prune_merge",
    metric: str = "class_attn",
    budget: int | None = None,
    max_draws: int = 1_000_000,
) -> EnumerationResult:
    """Rank explicit schedules, or ``samples`` random ones with FLOPs <= target."""
    partial = False
    draws = 0
    if schedules is None:
        if samples is None:
            raise ValueError("give either schedules or a sample count")
        rng = np.random.default_rng(seed)
        schedules = []
        while len(schedules) < samples and draws < max_draws:
            s = random_schedule(cfg.token_count, cfg.depth, rng, option)
            draws += 1
            if cost.schedule_flops(s, cfg) <= target:
                schedules.append(s)
        partial = len(schedules) < samples
    if budget is not None and len(schedules) > budget:
        schedules = schedules[:budget]
        partial = True
    accs = evaluate_schedules(params, cfg, images, labels, schedules, option, metric)
    scores = [ScheduleScore(s, cost.schedule_flops(s, cfg), a) for s, a in zip(schedules, accs)]
    feasible = [s for s in scores if s.flops <= target]
    best = max(feasible, key=lambda s: (s.accuracy, -s.flops)) if feasible else None
    return EnumerationResult(scores, pareto_front(scores), best, partial, draws)


# --- fine-tuning ----------------------------------------------------------------------


def finetune(
    params: dict[str, np.ndarray],
    schedule: CompressionSchedule,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    epochs: int = 1,
    lr: float = 2e-5,
    min_lr: float | None = None,
    weight_decay: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
    option: str = "prune_merge",
    metric: str = "class_attn",
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train backbone weights with tokens physically dropped per ``schedule``."""
    p = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    opt = AdamW(p, lr=lr, weight_decay=weight_decay)
    comp = ScheduleCompressor(schedule, metric, option)
    steps_per_epoch = -(-len(images) // batch_size)
    total = max(epochs * steps_per_epoch, 1)
    min_lr = lr / 20 if min_lr is None else min_lr
    losses = []
    step = 0
    for ep in range(epochs):
        rng = np.random.default_rng([seed, ep])
        for idx in _batches(len(images), batch_size, rng):
            res = model_forward(images[idx], p, cfg, comp)
            loss = cross_entropy(res.logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total, lr, min_lr))
            losses.append(float(loss.data))
            step += 1
    return {k: t.data for k, t in p.items()}, losses
