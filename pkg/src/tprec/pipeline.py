"""Stage orchestration: each stage reads upstream artifacts, writes its own, and leaves a manifest.

Manifests record the sha256 of every input and output, the full config and the per-stage
seed, so a stage can check that what it reads is exactly what the upstream stage wrote.
"""

from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .artifacts import file_digest, load_arrays, save_arrays
from .config import PipelineConfig
from .data import Dataset, read_dataset, write_dataset
from .embedding import EmbeddingTable, train_embeddings
from .evaluation import build_ground_truth, explanation_metrics, metrics_report, ranking_metrics, split
from .graph import FEATURE, ITEM, USER, Tckg, build_tckg, degree_report
from .policy import PolicyParams
from .reasoner import PathEnvironment, beam_search, config_dict, train_policy
from .recommender import RecommendQuery, recommend_from_paths, write_recommendations
from .synthetic import generate_synthetic
from .temporal_features import SECONDS_PER_DAY, CalendarContext, DailyCountSeries, day_index, feature_matrix
from .time_clustering import GmmModel, fit_gmm, posterior, select_cluster_count

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STAGES = ("synth", "features", "cluster", "build-graph", "train-embed", "train-policy", "recommend", "evaluate")

# artifact -> producing stage
PRODUCER = {
    "data/interactions.tsv": "synth",
    "data/kg.tsv": "synth",
    "data/reviews.tsv": "synth",
    "split.json": "features",
    "features.tprec": "features",
    "gmm.json": "cluster",
    "clusters.tprec": "cluster",
    "graph.tprec": "build-graph",
    "embedding.tprec": "train-embed",
    "policy.tprec": "train-policy",
    "recommendations.jsonl": "recommend",
    "recommend.json": "recommend",
    "metrics.json": "evaluate",
}


class PipelineError(RuntimeError):
    pass


class MissingStageError(PipelineError):
    def __init__(self, stage: str, missing: str, needed_by: str):
        self.stage = stage
        super().__init__(f"stage '{needed_by}' needs {missing}, which is written by '{stage}'; run `tprec {stage}` first")


class ProvenanceError(PipelineError):
    pass


def stage_seed(root: int, stage: str) -> int:
    """Independent seed for one stage, split off the root seed."""
    return int(np.random.default_rng([int(root), STAGES.index(stage)]).integers(2**31 - 1))


@dataclass
class Workspace:
    cfg: PipelineConfig
    root: Path

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, stage: str) -> Path:
        return self.root / "manifests" / f"{stage}.json"

    def manifest(self, stage: str) -> Optional[dict]:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    # dataset files come either from the config or from the synth stage
    def data_inputs(self) -> dict:
        d = self.cfg.data
        if d.interactions:
            out = {"interactions": Path(d.interactions)}
            if d.kg:
                out["kg"] = Path(d.kg)
            if d.reviews:
                out["reviews"] = Path(d.reviews)
            return out
        return {k: self.path(f"data/{k}.tsv") for k in ("interactions", "kg", "reviews")}

    def check_input(self, name_or_path, needed_by: str) -> Path:
        """Resolve an input and confirm it still matches its producer's manifest."""
        rel = name_or_path
        if isinstance(name_or_path, Path):
            try:
                rel = str(name_or_path.relative_to(self.root))
            except ValueError:
                rel = None
            if rel not in PRODUCER:
                if not name_or_path.exists():
                    raise PipelineError(f"stage '{needed_by}': input file {name_or_path} does not exist")
                return name_or_path
        producer = PRODUCER[rel]
        p = self.path(rel)
        man = self.manifest(producer)
        if not p.exists() or man is None:
            raise MissingStageError(producer, rel, needed_by)
        if man["outputs"].get(rel) != file_digest(p):
            raise ProvenanceError(f"{rel} changed after '{producer}' wrote it; rerun `tprec {producer}`")
        return p


def _digest_map(ws: Workspace, paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        try:
            key = str(p.relative_to(ws.root))
        except ValueError:
            key = str(p)
        out[key] = file_digest(p)
    return out


def verify_chain(ws: Workspace, stage: str) -> None:
    """Walk every manifest upstream of ``stage`` and refuse mixed provenance."""
    todo = [stage]
    seen = set()
    while todo:
        s = todo.pop()
        if s in seen:
            continue
        seen.add(s)
        man = ws.manifest(s)
        if man is None:
            raise MissingStageError(s, f"the manifest of '{s}'", stage)
        for rel, digest in man["inputs"].items():
            producer = PRODUCER.get(rel)
            if producer is None:
                continue  # external file: nothing upstream to compare against
            up = ws.manifest(producer)
            if up is None:
                raise MissingStageError(producer, rel, s)
            if up["outputs"].get(rel) != digest:
                raise ProvenanceError(
                    f"'{s}' was built from a different {rel} than the one '{producer}' last wrote; rerun from '{producer}'"
                )
            todo.append(producer)


# -- shared loaders --


def _load_dataset(ws: Workspace, stage: str) -> tuple[Dataset, list]:
    files = {k: ws.check_input(v, stage) for k, v in ws.data_inputs().items()}
    return read_dataset(files["interactions"], files.get("kg"), files.get("reviews")), list(files.values())


def _load_split(ws: Workspace, ds: Dataset, stage: str) -> tuple[dict, Path]:
    p = ws.check_input("split.json", stage)
    idx = json.loads(p.read_text())
    return {k: [ds.interactions[i] for i in v] for k, v in idx.items()}, p


def _load_calendar(ws: Workspace, stage: str):
    p = ws.check_input("features.tprec", stage)
    arrays, meta = load_arrays(p)
    ctx = CalendarContext(**meta["calendar"])
    series = DailyCountSeries(meta["series_origin"], arrays["series"])
    return arrays, meta, ctx, series, p


# -- stages --


def run_synth(ws: Workspace, seed: int) -> tuple[list, list, dict]:
    ds, _ = generate_synthetic(ws.cfg.synthetic_spec(seed))
    paths = write_dataset(ds, ws.path("data"))
    return [], list(paths.values()), {"interactions": len(ds.interactions), "kg_triples": len(ds.kg)}


def run_features(ws: Workspace, seed: int):
    ds, inputs = _load_dataset(ws, "features")
    parts = split(ds.interactions, ws.cfg.split_spec())
    position = {id(r): k for k, r in enumerate(ds.interactions)}
    index = {k: sorted(position[id(r)] for r in v) for k, v in parts.items()}
    if not index["train"]:
        raise PipelineError("no training interactions left after the split")
    ws.path("split.json").write_text(json.dumps(index, sort_keys=True))
    train = [ds.interactions[i] for i in index["train"]]
    stamps = [r.timestamp for r in train]
    # the calendar origin spans the whole log so any recommend time inside it can be featurized
    ctx = CalendarContext.from_timestamps(r.timestamp for r in ds.interactions)
    series = DailyCountSeries.from_timestamps(stamps)
    # one feature row per distinct training day; interactions point at their day's row
    days, row_of = np.unique([day_index(t) for t in stamps], return_inverse=True)
    feats = feature_matrix([int(d) * SECONDS_PER_DAY for d in days], ctx, series, tuple(ws.cfg.features.gaps))
    header = {
        "format_version": 1,
        "calendar": {"earliest_year": ctx.earliest_year, "earliest_day": ctx.earliest_day},
        "series_origin": series.origin_day,
        "gaps": list(ws.cfg.features.gaps),
    }
    arrays = {"features": feats, "days": days.astype(np.int64), "row_of": row_of.astype(np.int64), "series": series.counts}
    save_arrays(ws.path("features.tprec"), arrays, header)
    info = {**{k: len(v) for k, v in index.items()}, "days": int(len(days))}
    return inputs, [ws.path("split.json"), ws.path("features.tprec")], info


def run_cluster(ws: Workspace, seed: int):
    arrays, _, _, _, p = _load_calendar(ws, "cluster")
    feats = arrays["features"]
    c = ws.cfg.cluster
    gcfg = ws.cfg.gmm_config(seed)
    if c.fixed_l is not None:
        model = fit_gmm(feats, c.fixed_l, gcfg)
        L = c.fixed_l
    else:
        L, model = select_cluster_count(feats, range(c.l_min, c.l_max + 1), gcfg)
    day_clusters = posterior(model, feats).argmax(axis=1)
    clusters = day_clusters[arrays["row_of"]].astype(np.int64)
    model.save(ws.path("gmm.json"))
    save_arrays(ws.path("clusters.tprec"), {"clusters": clusters}, {"format_version": 1, "L": L})
    info = {"L": L, "bic": model.bic, "interactions_per_cluster": np.bincount(clusters, minlength=L).tolist()}
    return [p], [ws.path("gmm.json"), ws.path("clusters.tprec")], info


def run_build_graph(ws: Workspace, seed: int):
    ds, inputs = _load_dataset(ws, "build-graph")
    parts, sp = _load_split(ws, ds, "build-graph")
    cp = ws.check_input("clusters.tprec", "build-graph")
    arrays, meta = load_arrays(cp)
    clusters = arrays["clusters"]
    if len(clusters) != len(parts["train"]):
        raise ProvenanceError("cluster assignments and training split disagree in length; rerun 'cluster'")
    g = build_tckg(zip(parts["train"], clusters.tolist()), ds.kg, int(meta["L"]), ds.counts(), ds.names)
    g.save(ws.path("graph.tprec"))
    rep = degree_report(g)
    return inputs + [sp, cp], [ws.path("graph.tprec")], {"entities": g.n_entities, "report": rep}


def run_train_embed(ws: Workspace, seed: int):
    gp = ws.check_input("graph.tprec", "train-embed")
    g = Tckg.load(gp)
    emb = train_embeddings(g, ws.cfg.embed_config(seed))
    emb.save(ws.path("embedding.tprec"))
    final = emb.log[-1] if emb.log else {}
    return [gp], [ws.path("embedding.tprec")], {"final": final}


def run_train_policy(ws: Workspace, seed: int):
    gp = ws.check_input("graph.tprec", "train-policy")
    ep = ws.check_input("embedding.tprec", "train-policy")
    g, emb = Tckg.load(gp), EmbeddingTable.load(ep)
    users = np.unique(g.history[:, 0]) if len(g.history) else np.zeros(0, dtype=np.int64)
    if not len(users):
        raise PipelineError("graph has no users with training interactions")
    rcfg = ws.cfg.reasoner_config(seed)
    params, opt, tlog = train_policy(g, emb, users, rcfg)
    params.save(ws.path("policy.tprec"), opt)
    last = tlog.epochs[-1] if tlog.epochs else {}
    return [gp, ep], [ws.path("policy.tprec")], {"users": int(len(users)), "last_epoch": last, "skipped": tlog.skipped_batches, "config": config_dict(rcfg)}


def lower_median(values) -> int:
    vals = sorted(values)
    return int(vals[(len(vals) - 1) // 2])


def run_recommend(ws: Workspace, seed: int):
    ds, inputs = _load_dataset(ws, "recommend")
    parts, sp = _load_split(ws, ds, "recommend")
    _, meta, ctx, series, fp = _load_calendar(ws, "recommend")
    gp = ws.check_input("graph.tprec", "recommend")
    ep = ws.check_input("embedding.tprec", "recommend")
    pp = ws.check_input("policy.tprec", "recommend")
    mp = ws.check_input("gmm.json", "recommend")
    g, emb, gmm = Tckg.load(gp), EmbeddingTable.load(ep), GmmModel.load(mp)
    params = PolicyParams.load(pp)
    rc = ws.cfg.recommend
    env = PathEnvironment(g, emb, params.cfg.n_actions - 1, len(rc.beam), params.cfg.history_hops)
    test_times = defaultdict(list)
    for r in parts["test"]:
        test_times[r.user].append(r.timestamp)
    results, valid_counts, times = [], {}, {}
    gaps = tuple(meta["gaps"])
    user_base = g.offsets[USER]
    for local in sorted(test_times):
        u = user_base + local
        t_hat = lower_median(test_times[local])
        paths = beam_search(env, params, u, rc.beam)
        valid_counts[g.entity_name(u)] = sum(p.valid for p in paths)
        times[g.entity_name(u)] = t_hat
        results.append(recommend_from_paths(g, gmm, emb, RecommendQuery(u, t_hat, rc.top_k), paths, ctx, series, gaps))
    write_recommendations(ws.path("recommendations.jsonl"), results, g)
    summary = {"valid_paths": valid_counts, "recommend_time": times, "top_k": rc.top_k}
    ws.path("recommend.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    outs = [ws.path("recommendations.jsonl"), ws.path("recommend.json")]
    return inputs + [sp, fp, gp, ep, pp, mp], outs, {"users": len(results)}


def run_evaluate(ws: Workspace, seed: int):
    verify_chain(ws, "recommend")
    ds, inputs = _load_dataset(ws, "evaluate")
    parts, sp = _load_split(ws, ds, "evaluate")
    rp = ws.check_input("recommendations.jsonl", "evaluate")
    sp2 = ws.check_input("recommend.json", "evaluate")
    summary = json.loads(sp2.read_text())
    k = int(summary["top_k"])
    users, items = ds.names[USER], ds.names[ITEM]
    ranked = defaultdict(list)
    path_words = defaultdict(set)
    for line in rp.read_text().splitlines():
        rec = json.loads(line)
        if rec["rank"] > k:
            continue
        ranked[rec["user"]].append((rec["rank"], rec["item"]))
        for _, entity in rec["path"]:
            if entity.startswith(f"{FEATURE}:"):
                path_words[rec["user"]].add(entity.split(":", 1)[1])
    recs = {u: [item for _, item in sorted(v)] for u, v in ranked.items()}
    test = defaultdict(set)
    test_pairs = []
    for r in parts["test"]:
        test[f"{USER}:{users[r.user]}"].add(f"item:{items[r.item]}")
        test_pairs.append((r.user, r.item))
    ranking = ranking_metrics(recs, test, k)
    reasons = build_ground_truth(ds.reviews())
    truth = {f"{USER}:{users[u]}": w for u, w in reasons.for_pairs(test_pairs).items()}
    expl = explanation_metrics(path_words, truth)
    invalid = sum(1 for c in summary["valid_paths"].values() if c < 10)
    report = metrics_report(ws.cfg.data.name, ws.cfg.split.mode, k, ranking, invalid, expl)
    ws.path("metrics.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    return inputs + [sp, rp, sp2], [ws.path("metrics.json")], report


RUNNERS: dict[str, Callable] = {
    "synth": run_synth,
    "features": run_features,
    "cluster": run_cluster,
    "build-graph": run_build_graph,
    "train-embed": run_train_embed,
    "train-policy": run_train_policy,
    "recommend": run_recommend,
    "evaluate": run_evaluate,
}


def run_stage(stage: str, cfg: PipelineConfig, out: Optional[Path] = None) -> dict:
    """Run one stage and write its manifest; returns the manifest."""
    if stage not in RUNNERS:
        raise PipelineError(f"unknown stage '{stage}'; choose from {', '.join(STAGES)}")
    ws = Workspace(cfg, Path(out or cfg.output))
    ws.root.mkdir(parents=True, exist_ok=True)
    seed = stage_seed(cfg.seed, stage)
    log.info("running %s (seed %d)", stage, seed)
    started = time.perf_counter()
    inputs, outputs, info = RUNNERS[stage](ws, seed)
    elapsed = time.perf_counter() - started
    manifest = {
        "format_version": MANIFEST_VERSION,
        "stage": stage,
        "root_seed": cfg.seed,
        "stage_seed": seed,
        "config": cfg.to_dict(),
        "inputs": _digest_map(ws, inputs),
        "outputs": _digest_map(ws, outputs),
        "info": info,
        "timings": {"seconds": round(elapsed, 3)},
    }
    ws.manifest_path(stage).parent.mkdir(exist_ok=True)
    ws.manifest_path(stage).write_text(json.dumps(manifest, sort_keys=True, indent=1, default=float))
    log.info("%s finished in %.2fs", stage, elapsed)
    return manifest


def pipeline_stages(cfg: PipelineConfig) -> list:
    """Stages of a full run; synth only when no dataset files are configured."""
    return [s for s in STAGES if s != "synth" or not cfg.data.interactions]


def run_all(cfg: PipelineConfig, out: Optional[Path] = None) -> dict:
    manifests = {}
    for stage in pipeline_stages(cfg):
        manifests[stage] = run_stage(stage, cfg, out)
    return manifests
