"""Evaluation drivers: leave-one-domain-out and the four-setting ablation."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from .data import DomainDataset, benchmark_specs, generate_domain, make_disjoint
from .errors import ProtocolError
from .metrics import MetricsReport, average_reports, evaluate_embeddings
from .model import embed_numpy
from .trainer import TrainConfig, TrainState, train

SETTINGS = {
    "A": dict(use_msidg=False, use_pmr=False, use_dfc=False),
    "B": dict(use_msidg=True, use_pmr=False, use_dfc=False),
    "C": dict(use_msidg=True, use_pmr=True, use_dfc=False),
    "D": dict(use_msidg=True, use_pmr=True, use_dfc=True),
}
SETTING_LABELS = {
    "A": "A: baseline",
    "B": "B: + MS-IDG",
    "C": "C: + MS-IDG + PMR",
    "D": "D: + MS-IDG + PMR + DFC",
}


def setting_config(base: TrainConfig, setting: str) -> TrainConfig:
    if setting not in SETTINGS:
        raise ProtocolError(f"unknown ablation setting {setting!r}")
    return dataclasses.replace(base, **SETTINGS[setting])


def evaluate_state(state: TrainState, domain: DomainDataset, seed: int = 0) -> MetricsReport:
    emb = embed_numpy(state.params, domain.features)
    traces = {"epoch_loss": [e["mean_loss"] for e in state.epoch_log]}
    return evaluate_embeddings(emb, domain.labels, domain.cameras, seed=seed, loss_traces=traces)


def leave_one_out(domains: Sequence[DomainDataset], config: TrainConfig) -> dict[int, MetricsReport]:
    """Train on all domains but one, evaluate on the held-out one, for each domain.

    Returns reports keyed by held-out domain id plus an ``"average"`` entry.
    """
    if len(domains) < 2:
        raise ProtocolError(f"leave-one-domain-out needs >= 2 domains, got {len(domains)}")
    reports: dict = {}
    for i, held in enumerate(domains):
        sources = make_disjoint([d for j, d in enumerate(domains) if j != i])
        state = train(config, sources)
        reports[held.spec.domain_id] = evaluate_state(state, held, config.seed)
    reports["average"] = average_reports([r for k, r in reports.items() if k != "average"])
    return reports


def benchmark(data_cfg, seed: int) -> tuple[list[DomainDataset], DomainDataset]:
    specs, target_spec = benchmark_specs(
        data_cfg.num_sources,
        data_cfg.num_identities,
        data_cfg.samples_per_identity,
        data_cfg.num_cameras,
        data_cfg.feature_dim,
        seed,
        shift_scale=data_cfg.shift_scale,
        camera_jitter=data_cfg.camera_jitter,
        noise_sigma=data_cfg.noise_sigma,
    )
    all_domains = make_disjoint([generate_domain(s) for s in specs] + [generate_domain(target_spec)])
    return all_domains[:-1], all_domains[-1]


def _transfers(sources, target, protocol):
    domains = [*sources, target]
    if protocol == "target":
        return [("->".join(["+".join(f"S{d.spec.domain_id}" for d in sources), "T"]), sources, target)]
    out = []
    for i, held in enumerate(domains):
        rest = make_disjoint([d for j, d in enumerate(domains) if j != i])
        name = "+".join(f"D{d.spec.domain_id}" for d in rest) + f"->D{held.spec.domain_id}"
        out.append((name, rest, held))
    return out


def run_ablation_seed(data_cfg, base: TrainConfig, seed: int, settings: Sequence[str], protocol: str = "target") -> list[dict]:
    """One seed of the ablation: per setting and transfer, the target R1 and mAP."""
    sources, target = benchmark(data_cfg, seed)
    rows = []
    for name, srcs, tgt in _transfers(sources, target, protocol):
        for s in settings:
            cfg = dataclasses.replace(setting_config(base, s), seed=seed)
            report = evaluate_state(train(cfg, srcs), tgt, seed)
            rows.append({"seed": seed, "setting": s, "transfer": name, "rank1": report.rank1, "map": report.map})
    return rows


def ablation_table(rows: list[dict]) -> tuple[list[str], list[dict]]:
    """Mean over seeds per (setting, transfer), in percent, plus average gain vs A.

    Avg gain is the mean, over every (transfer, metric) column, of the row's
    value minus setting A's value, in percentage points.
    """
    transfers = list(dict.fromkeys(r["transfer"] for r in rows))
    settings = list(dict.fromkeys(r["setting"] for r in rows))
    columns = [f"{t} {m}" for t in transfers for m in ("R1", "mAP")]
    table = []
    for s in settings:
        out = {"setting": s}
        for t in transfers:
            sel = [r for r in rows if r["setting"] == s and r["transfer"] == t]
            out[f"{t} R1"] = 100.0 * math.fsum(r["rank1"] for r in sel) / len(sel)
            out[f"{t} mAP"] = 100.0 * math.fsum(r["map"] for r in sel) / len(sel)
        table.append(out)
    base = next((r for r in table if r["setting"] == "A"), None)
    for r in table:
        if base is None:
            r["avg_gain"] = float("nan")
        elif r is base:
            r["avg_gain"] = 0.0
        else:
            r["avg_gain"] = math.fsum(r[c] - base[c] for c in columns) / len(columns)
    return columns, table


def ablation_markdown(columns: list[str], table: list[dict]) -> str:
    head = "| Setting | " + " | ".join(columns) + " | Avg Gain |"
    sep = "|" + "---|" * (len(columns) + 2)
    lines = [head, sep]
    for r in table:
        gain = "--" if r["setting"] == "A" else f"{r['avg_gain']:+.2f}"
        cells = " | ".join(f"{r[c]:.2f}" for c in columns)
        lines.append(f"| {SETTING_LABELS.get(r['setting'], r['setting'])} | {cells} | {gain} |")
    return "\n".join(lines) + "\n"


def mean_target_map(rows: list[dict], setting: str) -> float:
    sel = [r["map"] for r in rows if r["setting"] == setting]
    return float(np.mean(sel)) if sel else float("nan")
