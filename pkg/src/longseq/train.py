"""Run configuration, the SPMD training loop, run comparison and feature ablation.

A run spawns ``world_size`` ranks. Consecutive blocks of ``sp_degree`` ranks
form sequence-parallel groups; every rank keeps a full weight replica and
weight gradients are summed over all ranks before the optimizer step. The
loss is reduced as (sum, count) pairs so that -100 padding and uneven
shards never bias the mean.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import yaml

from . import autograd as ag
from . import data as D
from . import ledger as L
from .collectives import ProcessGroup, run_spmd
from .errors import ConfigError, ValidationError
from .model import LayerOptions, ModelConfig, Transformer, lm_head_and_loss, make_attention
from .tiled import tiled_logits_loss
from .ulysses import UlyssesAttention, plan_head_shards

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
DEFAULT_DEVICE_BUDGET = 64 * 2 ** 20


@dataclass
class ParallelConfig:
    sp_degree: int = 1
    world_size: int = 1


@dataclass
class FeatureConfig:
    ulysses: bool = False
    tiled_mlp: bool = False
    tiled_loss: bool = False
    ckpt: bool = False
    ckpt_offload: bool = False
    optimizer_offload: bool = False
    attention: str = "causal"
    mlp_tiles: int | None = None
    mlp_tile_len: int | None = None
    logits_budget_bytes: int = 1 << 20
    device_budget: int | None = None
    host_budget: int | None = None
    naive_label_sharding: bool = False


@dataclass
class TrainConfig:
    steps: int = 20
    lr: float = 1e-3
    grad_accum: int = 1
    seed: int = 0
    precision: str = "float64"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str | None = None
    seqlen: int = 64
    packed_sample_len: int | None = None
    seed: int = 0
    noise: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str | None = None
    version: int = CONFIG_VERSION

    # -- (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("top level must be a mapping", "<root>")
        sections = {"model": ModelConfig, "parallel": ParallelConfig, "features": FeatureConfig,
                    "train": TrainConfig, "data": DataConfig}
        known = set(sections) | {"output_dir", "version"}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown section {key!r}", str(key), f"expected one of {sorted(known)}")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}", "version",
                              f"this build reads version {CONFIG_VERSION}")
        kwargs: dict[str, Any] = {}
        for name, typ in sections.items():
            kwargs[name] = _build_section(typ, doc.get(name) or {}, name)
        out = doc.get("output_dir")
        if out is not None and not isinstance(out, str):
            raise ConfigError("must be a string path", "output_dir")
        cfg = cls(output_dir=out, version=version, **kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"not valid YAML: {exc}", str(path)) from None
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
        return cls.from_dict(doc)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"steps": 1})``."""
        doc = self.to_dict()
        for sec, upd in sections.items():
            if isinstance(upd, dict):
                doc[sec] = {**doc[sec], **upd}
            else:
                doc[sec] = upd
        return RunConfig.from_dict(doc)

    # -- validation ------------------------------------------------------------
    def validate(self) -> None:
        p, f, t, d = self.parallel, self.features, self.train, self.data
        if p.world_size < 1:
            raise ConfigError("must be >= 1", "parallel.world_size")
        if p.sp_degree < 1:
            raise ConfigError("must be >= 1", "parallel.sp_degree")
        if p.sp_degree > p.world_size or p.world_size % p.sp_degree:
            raise ConfigError(f"sp_degree {p.sp_degree} must divide world_size {p.world_size}",
                              "parallel.sp_degree")
        if p.sp_degree > 1 and not f.ulysses:
            raise ConfigError("sequence parallelism needs the ulysses feature", "features.ulysses",
                              "set features.ulysses: true or sp_degree: 1")
        if f.ulysses:
            plan_head_shards(self.model.q_heads, self.model.kv_heads, p.sp_degree)
        make_attention(f.attention)
        if f.mlp_tiles is not None and f.mlp_tiles < 1:
            raise ConfigError("must be >= 1 when set", "features.mlp_tiles")
        if f.mlp_tile_len is not None and f.mlp_tile_len < 1:
            raise ConfigError("must be >= 1 when set", "features.mlp_tile_len")
        if f.mlp_tiles is not None and f.mlp_tile_len is not None:
            raise ConfigError("set at most one of mlp_tiles and mlp_tile_len", "features.mlp_tile_len")
        if f.logits_budget_bytes < 1:
            raise ConfigError("must be >= 1", "features.logits_budget_bytes")
        for name in ("device_budget", "host_budget"):
            v = getattr(f, name)
            if v is not None and v < 0:
                raise ConfigError("must be >= 0 when set", f"features.{name}")
        if t.steps < 0:
            raise ConfigError("must be >= 0", "train.steps")
        if t.grad_accum < 1:
            raise ConfigError("must be >= 1", "train.grad_accum")
        if t.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {t.precision!r}", "train.precision",
                              "use float64 or float32")
        if t.lr <= 0:
            raise ConfigError("must be > 0", "train.lr")
        if d.kind not in ("synthetic", "jsonl"):
            raise ConfigError(f"unknown data kind {d.kind!r}", "data.kind", "use synthetic or jsonl")
        if d.kind == "jsonl" and not d.path:
            raise ConfigError("jsonl data needs a path", "data.path")
        if d.seqlen < 2:
            raise ConfigError("must be >= 2", "data.seqlen")
        if d.packed_sample_len is not None and d.packed_sample_len < 2:
            raise ConfigError("must be >= 2 when set", "data.packed_sample_len")
        longest = d.packed_sample_len or d.seqlen
        if longest > self.model.max_position:
            raise ConfigError(
                f"samples of up to {longest} tokens exceed model.max_position {self.model.max_position}",
                "model.max_position",
            )

    @property
    def checkpoint_mode(self) -> str:
        if self.features.ckpt_offload:
            return "offload"
        return "ckpt" if self.features.ckpt else "none"


def _coerce(value, typ, path: str):
    """Check a YAML scalar against a dataclass field annotation."""
    ann = str(typ)
    optional = "None" in ann
    if value is None:
        if optional:
            return None
        raise ConfigError("may not be null", path)
    if "bool" in ann:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if "int" in ann and "float" not in ann:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if "float" in ann:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if "str" in ann:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def _build_section(typ, doc: dict, name: str):
    if not isinstance(doc, dict):
        raise ConfigError("section must be a mapping", name)
    fields = {f.name: f for f in dataclasses.fields(typ)}
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", f"{name}.{key}",
                              f"valid keys: {', '.join(fields)}")
        kwargs[key] = _coerce(value, fields[key].type, f"{name}.{key}")
    return typ(**kwargs)


def config_schema() -> dict:
    """Field names, types and defaults per section (printed by validate-config --schema)."""
    out: dict[str, Any] = {"version": CONFIG_VERSION}
    for name, typ in (("model", ModelConfig), ("parallel", ParallelConfig),
                      ("features", FeatureConfig), ("train", TrainConfig), ("data", DataConfig)):
        out[name] = {f.name: {"type": str(f.type), "default": _default(f)} for f in dataclasses.fields(typ)}
    out["output_dir"] = {"type": "str | None", "default": None}
    return out


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    def __init__(self, params: list[ag.Tensor], cfg: TrainConfig, tier: str = L.DEVICE):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        led = L.current()
        if led is not None:
            for a in self.m + self.v:
                led.observe(a, tag="optimizer", tier=tier)

    def step(self, grads: list[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data *= 1.0 - c.lr * c.weight_decay
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# ---------------------------------------------------------------------------
# data streams
# ---------------------------------------------------------------------------

def make_corpus(cfg: RunConfig):
    d = cfg.data
    if d.kind == "jsonl":
        return D.JsonlCorpus(d.path)
    return D.SyntheticCorpus(cfg.model.vocab_size, d.seqlen, d.seed, d.packed_sample_len, d.noise)


def rank_batches(cfg: RunConfig, sp_group: ProcessGroup, global_rank: int,
                 num_batches: int) -> Iterator[D.ShardedBatch]:
    """This rank's shard of every batch its SP group processes, in order.

    With D = W / P data-parallel groups, member k of SP group g reads
    samples k*D + g, k*D + g + W, ... so that local batch j of group g is
    global sample j*D + g and each optimizer step covers a contiguous range.
    """
    corpus = make_corpus(cfg)
    W = cfg.parallel.world_size
    P = sp_group.world_size
    n_groups = W // P
    g = (global_rank - sp_group.rank) // P
    rounds = math.ceil(num_batches / P)
    sources = [D.StridedSource(corpus, k * n_groups + g, W, rounds) for k in range(P)]
    if cfg.features.naive_label_sharding:
        return _naive_batches(sources, sp_group)
    return D.sp_over_dp_iterator(sources, sp_group)


def _naive_batches(sources, group) -> Iterator[D.ShardedBatch]:
    """The defective shard-then-shift order, for the regression guard."""
    P = group.world_size
    for row in zip(*[iter(s) for s in sources]):
        for k, b in enumerate(row):
            b = D.pad_to_multiple(b, P)
            shards = D.naive_shard_then_shift(b.input_ids, P)
            sb = shards[group.rank]
            n = b.seqlen // P
            sb.position_ids = b.position_ids[:, group.rank * n:(group.rank + 1) * n]
            sb.source_rank = k
            yield sb


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RankResult:
    rank: int
    losses: list[float]
    tokens: list[int]
    step_times: list[float]
    ledger_summary: dict
    ledger_json: str | None
    ledger_csv: str | None
    comm: dict
    live_after_step: list[int]
    grad_norms: list[float]
    final_params: dict[str, np.ndarray] | None = None


@dataclass
class RunResult:
    config: RunConfig
    ranks: list[RankResult]
    wall_time: float

    @property
    def losses(self) -> list[float]:
        return self.ranks[0].losses

    def peak(self, tier: str = L.DEVICE, tag: str | None = None) -> int:
        key = "peak" if tag is None else "peak_by_tag"
        vals = []
        for r in self.ranks:
            s = r.ledger_summary
            vals.append(s[key][tier] if tag is None else s[key][tier].get(tag, 0))
        return max(vals)

    def report(self) -> dict:
        cfg = self.config
        plan = None
        if cfg.features.ulysses:
            plan = plan_head_shards(cfg.model.q_heads, cfg.model.kv_heads, cfg.parallel.sp_degree).to_dict()
        return {
            "config": cfg.to_dict(),
            "seed": cfg.train.seed,
            "losses": self.losses,
            "final_loss": self.losses[-1] if self.losses else None,
            "tokens_per_step": self.ranks[0].tokens,
            "mean_step_time_s": float(np.mean(self.ranks[0].step_times)) if self.ranks[0].step_times else 0.0,
            "wall_time_s": self.wall_time,
            "head_plan": plan,
            "tiling": tiling_decisions(cfg),
            "device_budget": cfg.features.device_budget,
            "host_budget": cfg.features.host_budget,
            "peak_device_bytes": self.peak(L.DEVICE),
            "peak_host_bytes": self.peak(L.HOST),
            "ledger": [r.ledger_summary for r in self.ranks],
        }


def tiling_decisions(cfg: RunConfig) -> dict:
    from .tiled import logits_tile_len, mlp_tile_count

    f, m = cfg.features, cfg.model
    local = math.ceil(cfg.data.seqlen / cfg.parallel.sp_degree)
    eb = 8 if cfg.train.precision == "float64" else 4
    return {
        "mlp_tiles": mlp_tile_count(local, m.hidden_size, f.mlp_tiles, f.mlp_tile_len) if f.tiled_mlp else 1,
        "logits_tile_tokens": logits_tile_len(m.vocab_size, eb, f.logits_budget_bytes) if f.tiled_loss else local,
    }


def _rank_program(cfg: RunConfig, world: ProcessGroup, keep_params: bool,
                  record_events: bool) -> RankResult:
    P = cfg.parallel.sp_degree
    sp_group = world.split(P)
    f = cfg.features
    led = L.MemoryLedger(f.device_budget, f.host_budget, record_events=record_events)
    with led.activate(), ag.precision(cfg.train.precision):
        model = Transformer(cfg.model, seed=cfg.train.seed)
        model.register(led)
        params = model.parameters()
        opt = AdamW(params, cfg.train, L.HOST if f.optimizer_offload else L.DEVICE)
        inner = make_attention(f.attention, cfg.model.attn_block)
        if f.ulysses:
            attention = UlyssesAttention(sp_group, plan_head_shards(cfg.model.q_heads, cfg.model.kv_heads, P), inner)
        else:
            attention = inner
        opts = LayerOptions(cfg.checkpoint_mode, f.tiled_mlp, f.mlp_tiles, f.mlp_tile_len)
        A = cfg.train.grad_accum
        batches = rank_batches(cfg, sp_group, world.global_rank, cfg.train.steps * A)
        losses, tokens, times, live_after, gnorms = [], [], [], [], []
        for step in range(cfg.train.steps):
            t0 = time.perf_counter()
            model.zero_grad()
            local = np.zeros(2)
            for _ in range(A):
                b = next(batches)
                hidden = model(b.input_ids, b.position_ids, attention, opts)
                if f.tiled_loss:
                    loss_sum, count = tiled_logits_loss(hidden, model.params["lm_head"], b.shift_labels,
                                                        budget_bytes=f.logits_budget_bytes)
                else:
                    loss_sum, count = lm_head_and_loss(hidden, model.params["lm_head"], b.shift_labels)
                del hidden
                local += (float(loss_sum.data), count)
                loss_sum.backward()
                del loss_sum
            sums = world.all_reduce_scalars(local)
            count = sums[1]
            grads = []
            for p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.grad = None
                with led.scope("grads"):
                    g = world.all_reduce_sum(g, label="grads")
                    led.retag(led.observe(g), "grads")
                if count > 0:
                    g /= count
                grads.append(g)
                del g
            if count > 0:
                gnorms.append(float(np.sqrt(sum((g * g).sum() for g in grads))))
                opt.step(grads)
            else:
                gnorms.append(0.0)
            del grads
            losses.append(float(sums[0] / count) if count > 0 else float("nan"))
            tokens.append(int(count))
            times.append(time.perf_counter() - t0)
            live_after.append(led.live_bytes(L.DEVICE) + led.live_bytes(L.HOST))
        final = {k: v.data.copy() for k, v in model.params.items()} if keep_params else None
    return RankResult(
        rank=world.rank,
        losses=losses,
        tokens=tokens,
        step_times=times,
        ledger_summary=led.summary(),
        ledger_json=led.to_json() if record_events else None,
        ledger_csv=led.timeline_csv() if record_events else None,
        comm=sp_group.stats.to_dict() | {"world": world.stats.to_dict()},
        live_after_step=live_after,
        grad_norms=gnorms,
        final_params=final,
    )


def cmd_train(cfg: RunConfig, out_dir: str | Path | None = None, keep_params: bool = False,
              record_events: bool | None = None, timeout: float | None = None) -> RunResult:
    """Run training; write artifacts when an output directory is given."""
    out_dir = out_dir if out_dir is not None else cfg.output_dir
    if record_events is None:
        record_events = out_dir is not None
    t0 = time.perf_counter()
    ranks = run_spmd(cfg.parallel.world_size,
                     lambda g: _rank_program(cfg, g, keep_params, record_events), timeout=timeout)
    result = RunResult(cfg, ranks, time.perf_counter() - t0)
    if out_dir is not None:
        write_artifacts(result, Path(out_dir))
    return result


def write_artifacts(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    r0 = result.ranks[0]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "loss", "valid_tokens", "step_time_s"])
    for i, (l, n, t) in enumerate(zip(r0.losses, r0.tokens, r0.step_times)):
        w.writerow([i, repr(l), n, f"{t:.6f}"])
    (out / "loss.csv").write_text(buf.getvalue())
    for r in result.ranks:
        if r.ledger_json is not None:
            (out / f"ledger_rank{r.rank}.json").write_text(r.ledger_json)
            (out / f"ledger_rank{r.rank}.csv").write_text(r.ledger_csv)
    (out / "comm_stats.json").write_text(json.dumps({f"rank{r.rank}": r.comm for r in result.ranks}, indent=1))
    (out / "config.yaml").write_text(result.config.to_yaml())
    (out / "report.json").write_text(json.dumps(result.report(), indent=1))


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

@dataclass
class CompareResult:
    max_abs_diff: float
    per_step: list[float]
    tolerance: float
    passed: bool
    losses_a: list[float]
    losses_b: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


class StepCountMismatch(ValidationError):
    pass


def compare_losses(a: list[float], b: list[float], tolerance: float = 1e-8) -> CompareResult:
    if len(a) != len(b):
        raise StepCountMismatch(f"runs have different step counts: {len(a)} vs {len(b)}")
    diffs = [abs(x - y) for x, y in zip(a, b)]
    worst = max(diffs) if diffs else 0.0
    ok = all(math.isfinite(d) and d <= tolerance for d in diffs)
    return CompareResult(worst, diffs, tolerance, ok, list(a), list(b))


def cmd_compare(cfg_a: RunConfig, cfg_b: RunConfig, tolerance: float = 1e-8,
                out_dir: str | Path | None = None) -> CompareResult:
    if cfg_a.train.steps != cfg_b.train.steps:
        raise StepCountMismatch(f"configs request {cfg_a.train.steps} vs {cfg_b.train.steps} steps")
    ra = cmd_train(cfg_a, out_dir=Path(out_dir) / "a" if out_dir else None)
    rb = cmd_train(cfg_b, out_dir=Path(out_dir) / "b" if out_dir else None)
    res = compare_losses(ra.losses, rb.losses, tolerance)
    if out_dir:
        (Path(out_dir) / "verdict.json").write_text(json.dumps(res.to_dict(), indent=1))
    return res


def matched_baseline(cfg: RunConfig) -> RunConfig:
    """Single-rank, feature-free run that sees the same data per optimizer step."""
    P = cfg.parallel.world_size
    return cfg.replace(
        parallel={"sp_degree": 1, "world_size": 1},
        features={"ulysses": False, "tiled_mlp": False, "tiled_loss": False, "ckpt": False,
                  "ckpt_offload": False, "optimizer_offload": False, "naive_label_sharding": False,
                  "mlp_tiles": None, "mlp_tile_len": None, "device_budget": None, "host_budget": None},
        train={"grad_accum": cfg.train.grad_accum * (P // cfg.parallel.sp_degree)},
    )


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("baseline", {}),
    ("+tiled loss", {"tiled_loss": True}),
    ("+ulysses", {"tiled_loss": True, "ulysses": True}),
    ("+tiled mlp", {"tiled_loss": True, "ulysses": True, "tiled_mlp": True}),
    ("+ckpt offload", {"tiled_loss": True, "ulysses": True, "tiled_mlp": True, "ckpt_offload": True}),
]


def ablation_base_config() -> RunConfig:
    """Toy setup for the feasibility grid.

    The vocabulary is large enough that untiled logits dominate the baseline,
    and the fixed share is small so per-token memory decides every row.
    Wide attention blocks and 512-token MLP tiles keep long probes fast.
    """
    return RunConfig(
        model=ModelConfig(vocab_size=2048, hidden_size=64, n_layers=4, q_heads=8, kv_heads=8,
                          mlp_ratio=4, max_position=64, attn_block=256),
        parallel=ParallelConfig(1, 1),
        features=FeatureConfig(ckpt=True, optimizer_offload=True, attention="block_causal",
                               device_budget=DEFAULT_DEVICE_BUDGET, logits_budget_bytes=1 << 18,
                               mlp_tile_len=512),
        train=TrainConfig(steps=1, grad_accum=1),
        data=DataConfig(seqlen=64, packed_sample_len=64),
    )


@dataclass
class AblationRow:
    name: str
    features: dict
    sp_degree: int
    max_seqlen: int
    feasible: bool
    probes: list[tuple[int, bool]]
    step_time_s: float
    peak_device_bytes: int
    peak_host_bytes: int
    peak_by_tag: dict
    estimate: int
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def probe(cfg: RunConfig, seqlen: int) -> tuple[bool, RunResult | None, str]:
    """One real training step at ``seqlen``; False if any rank exceeds a budget."""
    c = cfg.replace(data={"seqlen": int(seqlen)}, train={"steps": 1, "grad_accum": 1}, output_dir=None)
    try:
        return True, cmd_train(c, out_dir=None, record_events=False), ""
    except L.OutOfMemoryError as exc:
        return False, None, str(exc)


def _row_config(base: RunConfig, feats: dict, sp: int) -> RunConfig:
    on = {k: bool(feats.get(k, False)) for k in ("tiled_loss", "ulysses", "tiled_mlp", "ckpt_offload")}
    P = sp if on["ulysses"] else 1
    return base.replace(features=on, parallel={"sp_degree": P, "world_size": P})


def feasibility(cfg: RunConfig, resolution: float = 0.02, s_cap: int = 1 << 22,
                growth: float = 4.0, start: int | None = None) -> tuple[int, list, RunResult | None, int]:
    """Largest sequence length for which one real step fits the device/host budgets.

    Each probe is a real training step with the budgets lifted, so it reports
    the exact peak per tier; a length fits iff every peak is within its
    budget (the ledger raises on exactly the allocation that would cross
    it). A secant search on peak/budget brackets the answer to within
    ``resolution`` (relative), never jumping more than ``growth``x past the
    largest length measured so far. ``start`` is an optional first guess,
    e.g. the answer for a configuration that needs no less memory.
    Returns (max seqlen, probes, result at max seqlen, first full-scale prediction).
    """
    P = cfg.parallel.sp_degree
    step = max(P, cfg.data.packed_sample_len or 1)
    caps = [(t, c) for t, c in ((L.DEVICE, cfg.features.device_budget), (L.HOST, cfg.features.host_budget))
            if c is not None]
    probes: list[tuple[int, bool]] = []
    if not caps:
        return s_cap, probes, None, s_cap
    free = cfg.replace(features={"device_budget": None, "host_budget": None})
    ratio: dict[int, float] = {}
    results: dict[int, RunResult] = {}

    def measure(s: int) -> float:
        if s not in ratio:
            t0 = time.perf_counter()
            res = probe(free, s)[1]
            ratio[s] = max(res.peak(t) / c if c else math.inf for t, c in caps)
            probes.append((s, ratio[s] <= 1.0))
            if ratio[s] <= 1.0:
                results[s] = res
            log.info("probe s=%d peak/budget=%.4f (%.1fs)", s, ratio[s], time.perf_counter() - t0)
        return ratio[s]

    def align(x: float) -> int:
        return int(max(step, min(s_cap, x // step * step)))

    def secant(a: int, b: int) -> float:
        ra, rb = ratio[a], ratio[b]
        if rb <= ra:
            return math.inf
        return b + (1.0 - rb) * (b - a) / (rb - ra)

    if measure(step) > 1.0:
        return 0, probes, None, 0
    measure(align(16 * step))
    if start is not None and align(start) > 16 * step:
        measure(align(start))
    first_est = 0
    for _ in range(40):
        ok = sorted(s for s, r in ratio.items() if r <= 1.0)
        bad = sorted(s for s, r in ratio.items() if r > 1.0)
        lo, hi = ok[-1], (bad[0] if bad else None)
        tol = max(step, resolution * lo)
        if hi is not None and hi - lo <= tol:
            break
        if lo >= s_cap:
            break
        if hi is None:
            below = ok[-2] if len(ok) > 1 else 0
            est = min(secant(below, lo) if below else math.inf, lo * growth, s_cap)
        else:
            est = secant(lo, hi)
        first_est = first_est or align(est)
        if hi is None and est - lo > 4 * tol:
            targets = [align(est - 0.4 * tol)]  # far away: one run, then re-predict
        else:
            # close: straddle the prediction so a good one closes the bracket in two runs
            targets = [align(est - 0.4 * tol), align(est + 0.4 * tol) + step]
        targets = [t for t in targets if t > lo and (hi is None or t < hi)]
        if not targets:
            targets = [align((lo + hi) // 2)] if hi is not None and align((lo + hi) // 2) > lo else []
        if not targets:
            break
        for t in targets:
            if measure(t) > 1.0:
                break
    lo = max(s for s, r in ratio.items() if r <= 1.0)
    return lo, probes, results.get(lo), first_est


def cmd_ablate(base: RunConfig | None = None, rows: list[tuple[str, dict]] | None = None,
               sp: int = 8, resolution: float = 0.02, out_dir: str | Path | None = None) -> list[AblationRow]:
    base = base or ablation_base_config()
    rows = rows or ABLATION_ROWS
    table = []
    prev = None
    for name, feats in rows:
        t0 = time.perf_counter()
        try:
            cfg = _row_config(base, feats, sp)
            s, probes, best, est = feasibility(cfg, resolution, start=prev)
            prev = s or None
            pk = best.ranks[0].ledger_summary["peak_by_tag"] if best else {}
            row = AblationRow(name, feats, cfg.parallel.sp_degree, s, s > 0, probes,
                              float(np.mean(best.ranks[0].step_times)) if best else 0.0,
                              best.peak(L.DEVICE) if best else 0, best.peak(L.HOST) if best else 0,
                              pk, est)
        except Exception as exc:  # noqa: BLE001 - a failing row is recorded, the grid continues
            log.exception("ablation row %s failed", name)
            row = AblationRow(name, feats, sp, 0, False, [], 0.0, 0, 0, {}, 0, f"{type(exc).__name__}: {exc}")
        log.info("ablation %-14s max seqlen %d (%.1fs)", name, row.max_seqlen, time.perf_counter() - t0)
        table.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps({
            "device_budget": base.features.device_budget,
            "base_config": base.to_dict(),
            "rows": [r.to_dict() for r in table],
        }, indent=1))
        (out / "ablation.csv").write_text(format_ablation_csv(table))
    return table


def format_ablation_csv(table: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["row", "sp_degree", "max_seqlen", "step_time_s", "peak_device_bytes", "peak_host_bytes", "error"])
    for r in table:
        w.writerow([r.name, r.sp_degree, r.max_seqlen, f"{r.step_time_s:.4f}", r.peak_device_bytes,
                    r.peak_host_bytes, r.error])
    return buf.getvalue()
