"""Latency and device-energy model for local, edge and split execution.

End-to-end delay is ``D_head + D_net + D_tail``. The network term is the
uplink transfer of the payload plus the downlink transfer of the label
frame, each carrying half of the configured round-trip time. Device energy
integrates head, radio and idle power over those durations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from splitcomp import kernels
from splitcomp.errors import MissingConfig, TraceExhausted

STRATEGIES = ("local", "edge", "split")
# size of an INFER_RESPONSE frame: 10-byte header + 16-byte body
RESPONSE_BYTES = 26


@dataclass
class ExecutionProfile:
    d_head_s: float
    d_tail_s: float
    p_head_w: float = 0.0
    p_net_w: float = 0.0
    p_idle_w: float = 0.0
    source: str = "configured"

    def __post_init__(self):
        for k in ("d_head_s", "d_tail_s", "p_head_w", "p_net_w", "p_idle_w"):
            v = float(getattr(self, k))
            if not v >= 0 or not math.isfinite(v):
                raise ValueError(f"{k} must be a finite value >= 0, got {v}")
            setattr(self, k, v)
        if self.source not in ("measured", "configured"):
            raise ValueError(f"source must be measured or configured, got {self.source!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class ChannelModel:
    kind: str
    rate_bps: float | None = None
    trace: list | None = None  # [(t_s, rate_bps), ...]
    rtt_s: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("fixed_rate", "trace"):
            raise ValueError(f"channel kind must be fixed_rate or trace, got {self.kind!r}")
        if not self.rtt_s >= 0:
            raise ValueError("rtt_s must be >= 0")
        if self.kind == "fixed_rate":
            if self.rate_bps is None or not self.rate_bps > 0:
                raise ValueError(f"fixed_rate channel needs rate_bps > 0, got {self.rate_bps}")
            self.rate_bps = float(self.rate_bps)
        else:
            if not self.trace:
                raise ValueError("trace channel needs at least one sample")
            arr = np.asarray(self.trace, dtype=np.float64).reshape(-1, 2)
            if np.any(np.diff(arr[:, 0]) <= 0):
                raise ValueError("trace timestamps must be strictly increasing")
            if np.any(arr[:, 1] <= 0):
                raise ValueError("trace rates must be > 0")
            self.trace = [(float(t), float(r)) for t, r in arr]
        if not self.name:
            self.name = f"{self.rate_bps:g}bps" if self.kind == "fixed_rate" else "trace"

    @classmethod
    def fixed(cls, rate_bps, rtt_s=0.0, name=""):
        return cls("fixed_rate", rate_bps=rate_bps, rtt_s=rtt_s, name=name)

    @classmethod
    def from_trace(cls, times, rates, rtt_s=0.0, name=""):
        return cls("trace", trace=list(zip(times, rates)), rtt_s=rtt_s, name=name)

    def scaled(self, rate_bps):
        """Same channel at a different fixed rate (sweeps over rate)."""
        return ChannelModel.fixed(rate_bps, self.rtt_s, name=f"{rate_bps:g}bps")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class DelayBreakdown:
    d_head_s: float = 0.0
    d_net_up_s: float = 0.0
    d_tail_s: float = 0.0
    d_net_down_s: float = 0.0
    d_serialize_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.d_head_s + self.d_serialize_s + self.d_net_up_s + self.d_tail_s + self.d_net_down_s

    def to_dict(self):
        d = asdict(self)
        d["total_s"] = self.total_s
        return d


@dataclass
class SweepRow:
    model_name: str
    split_point: str
    channels: int
    codec: str
    payload_bytes: int
    top1: float
    d_e2e_s: float
    energy_j: float
    strategy: str
    channel: str = ""
    rate_bps: float | None = None


@dataclass
class ModelEntry:
    """One deployable model for a sweep.

    ``top1`` is the split model's accuracy; ``teacher_top1`` is used for the
    local and edge strategies, which run the unmodified model.
    """

    name: str
    split_point: str
    channels: int
    codec: str
    payload_bytes: int
    top1: float
    input_bytes: int
    teacher_top1: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# --------------------------------------------------------------------------
# delay and energy
# --------------------------------------------------------------------------


def network_delay(size_bytes: int, channel: ChannelModel, t0: float = 0.0) -> float:
    """Seconds to deliver ``size_bytes`` starting at ``t0``, plus half the rtt."""
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    half_rtt = channel.rtt_s / 2
    if channel.kind == "fixed_rate":
        return 8.0 * size_bytes / channel.rate_bps + half_rtt
    times = np.array([t for t, _ in channel.trace])
    rates = np.array([r for _, r in channel.trace])
    if t0 > times[-1]:
        raise TraceExhausted(f"t0={t0} s lies beyond the trace end at {times[-1]} s")
    if t0 < times[0]:
        raise ValueError(f"t0={t0} s precedes the first trace sample at {times[0]} s")
    if size_bytes == 0:
        return half_rtt
    return float(kernels.trace_transfer_times(times, rates, t0, 8.0 * size_bytes)[0]) + half_rtt


def end_to_end(profile: ExecutionProfile, channel: ChannelModel, payload_bytes: int,
               response_bytes: int = RESPONSE_BYTES, *, strategy: str = "split",
               input_bytes: int | None = None, t0: float = 0.0) -> DelayBreakdown:
    """Delay decomposition for one inference.

    ``local`` keeps all compute in ``d_head`` (the profile's head time is the
    full on-device time) and uses no network. ``edge`` uploads
    ``input_bytes`` and runs everything in ``d_tail``. ``split`` uploads
    ``payload_bytes`` after the head and returns the label after the tail.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "local":
        return DelayBreakdown(d_head_s=profile.d_head_s)
    if strategy == "edge":
        if input_bytes is None:
            raise MissingConfig("edge strategy needs input_bytes")
        d_head, size = 0.0, input_bytes
    else:
        d_head, size = profile.d_head_s, payload_bytes
    up = network_delay(size, channel, t0 + d_head)
    down = network_delay(response_bytes, channel, t0 + d_head + up + profile.d_tail_s)
    return DelayBreakdown(d_head_s=d_head, d_net_up_s=up, d_tail_s=profile.d_tail_s, d_net_down_s=down)


def device_energy(profile: ExecutionProfile, breakdown: DelayBreakdown) -> float:
    """Joules spent on the device: head, radio (both directions) and idle-wait power."""
    return (
        profile.p_head_w * (breakdown.d_head_s + breakdown.d_serialize_s)
        + profile.p_net_w * (breakdown.d_net_up_s + breakdown.d_net_down_s)
        + profile.p_idle_w * breakdown.d_tail_s
    )


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def _profile_for(profiles, model_name, strategy):
    by_model = profiles.get(model_name, profiles.get("*"))
    if by_model is None:
        raise MissingConfig(f"no execution profile for model {model_name!r}")
    if isinstance(by_model, ExecutionProfile):
        return by_model
    prof = by_model.get(strategy)
    if prof is None:
        raise MissingConfig(f"no {strategy!r} execution profile for model {model_name!r}")
    return prof if isinstance(prof, ExecutionProfile) else ExecutionProfile.from_dict(prof)


def sweep(models, channels, profiles, strategies=STRATEGIES, *, response_bytes: int = RESPONSE_BYTES,
          t0: float = 0.0) -> list[SweepRow]:
    """One row per model x channel x strategy, in that nesting order.

    ``profiles`` maps a model name (or ``"*"``) to either one profile or a
    ``{strategy: profile}`` dict.
    """
    rows = []
    strategies = [s for s in STRATEGIES if s in set(strategies)]
    for m in models:
        m = m if isinstance(m, ModelEntry) else ModelEntry.from_dict(m)
        for ch in channels:
            for strat in strategies:
                prof = _profile_for(profiles, m.name, strat)
                payload = {"local": 0, "edge": m.input_bytes, "split": m.payload_bytes}[strat]
                bd = end_to_end(prof, ch, m.payload_bytes, response_bytes, strategy=strat,
                                input_bytes=m.input_bytes, t0=t0)
                top1 = m.top1 if strat == "split" or m.teacher_top1 is None else m.teacher_top1
                rows.append(
                    SweepRow(
                        m.name, m.split_point if strat == "split" else "-", m.channels if strat == "split" else 0,
                        m.codec if strat == "split" else ("raw" if strat == "edge" else "-"),
                        payload, top1, bd.total_s, device_energy(prof, bd), strat, ch.name,
                        ch.rate_bps if ch.kind == "fixed_rate" else None,
                    )
                )
    return rows


def choose_strategy(rows) -> str:
    """Lowest delay; ties go to lower energy, then local < edge < split."""
    rows = list(rows)
    if not rows:
        raise ValueError("choose_strategy needs at least one row")
    best = min(rows, key=lambda r: (r.d_e2e_s, r.energy_j, STRATEGIES.index(r.strategy)))
    return best.strategy


def crossover_rate(split: ExecutionProfile, edge: ExecutionProfile, input_bytes: int, payload_bytes: int) -> float:
    """Fixed rate (bps) at which split and edge offloading take equally long.

    Below it split is faster. Derived from
    ``d_head + 8*payload/r + tail_split = 8*input/r + tail_edge`` (the rtt and
    the downlink cancel). Returns ``inf`` when split wins at every rate and
    ``0`` when it never does.
    """
    gap_bits = 8.0 * (input_bytes - payload_bytes)
    extra = split.d_head_s + split.d_tail_s - edge.d_tail_s
    if gap_bits <= 0:
        return 0.0 if extra >= 0 else math.inf
    if extra <= 0:
        return math.inf
    return gap_bits / extra


def crossover_by_bisection(split, edge, input_bytes, payload_bytes, lo=1.0, hi=1e12, rtol=1e-12) -> float:
    """Locate the same crossover by evaluating :func:`end_to_end` (cross-check)."""

    def gap(rate):
        ch = ChannelModel.fixed(rate)
        s = end_to_end(split, ch, payload_bytes, strategy="split").total_s
        e = end_to_end(edge, ch, payload_bytes, strategy="edge", input_bytes=input_bytes).total_s
        return s - e

    if gap(lo) >= 0 or gap(hi) <= 0:
        raise ValueError("no sign change of split-minus-edge delay in the bracket")
    while hi - lo > rtol * hi:
        mid = math.sqrt(lo * hi) if hi / lo > 4 else (lo + hi) / 2
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def load_trace_csv(path: str, rtt_s: float = 0.0, name: str | None = None) -> ChannelModel:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"t_s", "rate_bps"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: trace CSV needs header t_s,rate_bps")
        rows = [(float(r["t_s"]), float(r["rate_bps"])) for r in reader]
    return ChannelModel("trace", trace=rows, rtt_s=rtt_s, name=name or path.rsplit("/", 1)[-1])


def write_trace_csv(channel: ChannelModel, path: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_s", "rate_bps"])
        for t, r in channel.trace:
            w.writerow([repr(t), repr(r)])


def load_json(path: str):
    with open(path) as f:
        return json.load(f)


def load_profiles(path: str) -> dict:
    """``{model: {strategy: profile}}`` (or ``{model: profile}``) from JSON."""
    raw = load_json(path)
    out = {}
    for model, v in raw.items():
        if "d_head_s" in v:
            out[model] = ExecutionProfile.from_dict(v)
        else:
            out[model] = {s: ExecutionProfile.from_dict(p) for s, p in v.items()}
    return out


def load_channels(path: str, base_dir: str | None = None) -> list[ChannelModel]:
    """Channel list from JSON; ``trace_csv`` entries are resolved against ``base_dir``."""
    import os

    raw = load_json(path)
    base_dir = base_dir or os.path.dirname(os.path.abspath(path))
    out = []
    for entry in raw["channels"] if isinstance(raw, dict) else raw:
        if "trace_csv" in entry:
            p = entry["trace_csv"]
            p = p if os.path.isabs(p) else os.path.join(base_dir, p)
            out.append(load_trace_csv(p, entry.get("rtt_s", 0.0), entry.get("name")))
        else:
            out.append(ChannelModel.from_dict(entry))
    return out


ROW_FIELDS = tuple(SweepRow.__dataclass_fields__)


def write_rows(rows, path: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow(["" if getattr(r, k) is None else _fmt(getattr(r, k)) for k in ROW_FIELDS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def summarize(rows) -> dict:
    """Best strategy per (model, channel) plus the rows' energy-model note."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.model_name, r.channel), []).append(r)
    best = [
        {"model": m, "channel": c, "strategy": choose_strategy(g),
         "d_e2e_s": min(x.d_e2e_s for x in g if x.strategy == choose_strategy(g))}
        for (m, c), g in groups.items()
    ]
    return {
        "n_rows": len(rows),
        "best": best,
        "energy_model": "p_head*d_head + p_net*(d_up + d_down) + p_idle*d_tail",
    }


def plot_curves(rows, out_prefix: str) -> list[str]:
    """Data-size-vs-accuracy and delay-vs-rate plots; returns the file paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    seen = {}
    for r in rows:
        if r.strategy == "split":
            seen[(r.model_name, r.payload_bytes)] = r.top1
    for (name, size), acc in sorted(seen.items(), key=lambda kv: kv[0][1]):
        ax.scatter(size / 1024, 100 * acc, label=name)
    ax.set_xlabel("transferred data [KiB]")
    ax.set_ylabel("top-1 accuracy [%]")
    ax.set_xscale("log")
    if seen:
        ax.legend(fontsize=7)
    fig.tight_layout()
    p = f"{out_prefix}_size_vs_accuracy.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    curves: dict = {}
    for r in rows:
        if r.rate_bps is not None:
            curves.setdefault((r.model_name, r.strategy), []).append((r.rate_bps, r.d_e2e_s))
    for (name, strat), pts in sorted(curves.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"{name}/{strat}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("rate [bit/s]")
    ax.set_ylabel("end-to-end delay [s]")
    if curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    p = f"{out_prefix}_delay_vs_rate.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
