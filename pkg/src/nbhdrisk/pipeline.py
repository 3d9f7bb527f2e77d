"""Config-driven analysis pipeline and its stage functions.

Stages read and write plain files in one output directory, so running them
one by one gives the same tree as :func:`run_pipeline`:

============  ================================================  =========
stage         writes                                            exit code
============  ================================================  =========
ingest        table.csv, variation.csv                          10
pollution     pollution_risk.csv (+ sigma_tuning.csv)           20
scan          scan.json                                         30
cluster       pca_scores.csv, clusters.csv, bic_table.csv,      40
              profiles.json
fit           gamfit.json, curves/<factor>.csv                  50
select        selection.json                                    60
============  ================================================  =========

``run_pipeline`` adds ``report.json`` (schema in ``REPORT_SCHEMA.md``).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
import string
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import FAMILIES, class_profile, relabel_by_response, select_model
from .dimred import fit_pca, project, variance_explained
from .gam import GamConfig, fit_gam, smooth_curve
from .ingest import (FactorInfo, SyntheticSpec, TableSchema, ValidationError,
                     generate_synthetic, load_facilities, load_factor_table, load_windrose,
                     standardize, validate_variation, write_factor_table)
from .plume import PlumeParams, table_risk, tune_sigma
from .select import (ExclusivityGroup, SelectionResult, check_groups, pick_winner, rank,
                     search_best_group, single_factor_scan)

SCHEMA_VERSION = "1.0"
EXIT_CODES = {"config": 2, "ingest": 10, "pollution": 20, "scan": 30, "cluster": 40,
              "fit": 50, "select": 60}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlumeSettings:
    mu_km: float = 2.5
    sigma_km: float = 1.0
    epsilon: float = 1.0
    sigma_candidates: tuple = ()
    factor_name: str = "industrial_pollution"
    description: str = "log wind-weighted TEP exposure from industrial facilities"


@dataclass(frozen=True)
class SelectionSettings:
    threshold: float = 0.10
    max_size: int = 6
    budget: int = 5000
    min_class_size: int = 30


@dataclass(frozen=True)
class ClusterSettings:
    k_min: int = 1
    k_max: int = 9
    families: tuple = FAMILIES
    n_restarts: int = 10
    n_components: int = 2


@dataclass(frozen=True)
class RunConfig:
    seed: int
    base_dir: Path
    neighborhoods: str | None = None
    facilities: str | None = None
    windrose: str | None = None
    synthetic: dict | None = None
    response: str = "response"
    factors: dict | None = None
    cluster_features: tuple | None = None
    exclusivity_groups: tuple = ()
    plume: PlumeSettings = field(default_factory=PlumeSettings)
    gam: GamConfig = field(default_factory=GamConfig)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    def path(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self):
        return self.path(self.output_dir)

    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _known(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ValueError(f"unknown key(s) in {where}: {sorted(extra)}")


def config_from_dict(raw, base_dir=".", seed=None, output_dir=None):
    raw = json.loads(json.dumps(raw))  # detach and normalise
    if seed is not None:
        raw["seed"] = int(seed)
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    _known(raw, {"seed", "inputs", "response", "factors", "cluster_features",
                 "exclusivity_groups", "plume", "gam", "selection", "cluster", "output_dir"},
           "config")
    if "seed" not in raw or raw["seed"] is None:
        raise ValueError("config must set a seed (or pass --seed)")
    inputs = raw.get("inputs", {})
    _known(inputs, {"neighborhoods", "facilities", "windrose", "synthetic"}, "inputs")
    if not inputs.get("neighborhoods") and not inputs.get("synthetic"):
        raise ValueError("inputs need 'neighborhoods' or 'synthetic'")
    synthetic = inputs.get("synthetic")
    base = Path(base_dir)
    if isinstance(synthetic, str):
        with open(base / synthetic if not Path(synthetic).is_absolute() else synthetic) as fh:
            synthetic = json.load(fh)
    groups = tuple(ExclusivityGroup(g["name"], tuple(g["members"]), g.get("scope", "all"))
                   for g in raw.get("exclusivity_groups", []))
    check_groups(groups)
    plume = dict(raw.get("plume", {}))
    if "sigma_candidates" in plume:
        plume["sigma_candidates"] = tuple(plume["sigma_candidates"] or ())
    clus = dict(raw.get("cluster", {}))
    if "families" in clus:
        clus["families"] = tuple(clus["families"])
    feats = raw.get("cluster_features")
    return RunConfig(
        seed=int(raw["seed"]), base_dir=base,
        neighborhoods=inputs.get("neighborhoods"), facilities=inputs.get("facilities"),
        windrose=inputs.get("windrose"), synthetic=synthetic,
        response=raw.get("response", "response"), factors=raw.get("factors"),
        cluster_features=tuple(feats) if feats else None, exclusivity_groups=groups,
        plume=PlumeSettings(**plume), gam=GamConfig(**raw.get("gam", {})),
        selection=SelectionSettings(**raw.get("selection", {})),
        cluster=ClusterSettings(**clus), output_dir=raw.get("output_dir", "out"), raw=raw)


def load_config(path, seed=None, output_dir=None):
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    return config_from_dict(raw, base_dir=path.parent, seed=seed, output_dir=output_dir)


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, float):
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(v, (np.floating,)):
        return _clean(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@contextmanager
def staged_output(out_dir):
    """Write into a scratch directory and move files into ``out_dir`` on success.

    On any exception the scratch directory is removed and ``out_dir`` keeps
    whatever it held before.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    for src in sorted(tmp.rglob("*")):
        if src.is_file():
            dst = out_dir / src.relative_to(tmp)
            dst.parent.mkdir(parents=True, exist_ok=True)
            src.replace(dst)
    shutil.rmtree(tmp, ignore_errors=True)


def _require(path, stage):
    if not Path(path).exists():
        raise StageError(stage, f"missing upstream artifact: {Path(path).name} (expected {path})")
    return path


def class_letter(i):
    return string.ascii_uppercase[i] if i < 26 else f"K{i}"


# --------------------------------------------------------------------------
# table sources
# --------------------------------------------------------------------------

def _schema(cfg):
    if cfg.factors is None:
        return TableSchema(response=cfg.response)
    infos = {}
    for name, meta in cfg.factors.items():
        meta = meta or {}
        infos[name] = FactorInfo(description=meta.get("description", name),
                                 unit=meta.get("unit", ""), group=meta.get("group", "non_env"))
    return TableSchema(response=cfg.response, factors=infos)


def source_table(cfg):
    """The raw neighborhood table named by the config inputs."""
    if cfg.synthetic is not None:
        table, labels, _ = generate_synthetic(SyntheticSpec.from_dict(cfg.synthetic))
        return table, labels
    return load_factor_table(cfg.path(cfg.neighborhoods), _schema(cfg)), None


def analysis_table(cfg, out, stage):
    """``table.csv`` plus the pollution column when ``pollution_risk.csv`` exists."""
    path = _require(out / "table.csv", stage)
    infos = None
    if cfg.factors is not None:
        infos = _schema(cfg).factors
    header, _ = read_csv(path)
    names = [h for h in header if h not in ("neighborhood_id", "name", "lat", "lon", "response")]
    if infos is None or set(infos) != set(names):
        infos = {n: (infos or {}).get(n, FactorInfo(description=n)) for n in names}
    table = load_factor_table(path, TableSchema(response="response", factors=infos))
    risk_path = out / "pollution_risk.csv"
    if risk_path.exists():
        _, rows = read_csv(risk_path)
        risk = {r[0]: (float(r[1]) if r[1] else math.nan) for r in rows}
        values = [risk.get(i, math.nan) for i in table.ids]
        table = table.with_factor(cfg.plume.factor_name, values,
                                  FactorInfo(cfg.plume.description, "log TEP", "built_env"))
    return table


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_ingest(cfg, out):
    try:
        table, labels = source_table(cfg)
    except (ValueError, FileNotFoundError) as exc:
        raise StageError("ingest", str(exc)) from exc
    metas = validate_variation(table, cfg.gam.k)
    with staged_output(out) as tmp:
        write_factor_table(table, tmp / "table.csv")
        write_csv(tmp / "variation.csv",
                  ["factor", "group", "unique_value_count", "variation_sufficient"],
                  [(m.name, m.group, m.unique_value_count, str(m.variation_sufficient).lower())
                   for m in metas])
    return table


def stage_pollution(cfg, out):
    if not cfg.facilities:
        raise StageError("pollution", "config has no inputs.facilities")
    try:
        facilities = load_facilities(cfg.path(cfg.facilities))
        rose = load_windrose(cfg.path(cfg.windrose)) if cfg.windrose else None
        table, _ = source_table(cfg)
        p = cfg.plume
        sigma, corr = p.sigma_km, None
        if p.sigma_candidates:
            sigma, corr = tune_sigma(facilities, table, rose, list(p.sigma_candidates),
                                     mu_km=p.mu_km, epsilon=p.epsilon)
        risk = table_risk(facilities, table, rose,
                          PlumeParams(mu_km=p.mu_km, sigma_km=sigma, epsilon=p.epsilon))
    except (ValueError, FileNotFoundError) as exc:
        raise StageError("pollution", str(exc)) from exc
    with staged_output(out) as tmp:
        write_csv(tmp / "pollution_risk.csv", ["neighborhood_id", "risk"],
                  zip(table.ids, risk))
        if corr is not None:
            write_csv(tmp / "sigma_tuning.csv", ["sigma_km", "correlation", "selected"],
                      [(s, corr[s], str(s == sigma).lower()) for s in p.sigma_candidates])
    return risk


def _score_json(s):
    return {
        "factors": list(s.factors),
        "deviance_explained": s.deviance_explained,
        "all_significant": s.all_significant,
        "error": s.error or None,
        "terms": [{"name": t.name, "edf": t.edf, "p_value": t.p_value, "lambda": t.lam}
                  for t in s.terms],
    }


def stage_scan(cfg, out):
    table = analysis_table(cfg, out, "scan")
    try:
        metas = validate_variation(table, cfg.gam.k)
        factors = [m.name for m in metas if m.variation_sufficient]
        scores = single_factor_scan(table, factors, cfg.gam, cfg.selection.threshold)
    except ValueError as exc:
        raise StageError("scan", str(exc)) from exc
    doc = {
        "k": cfg.gam.k,
        "threshold": cfg.selection.threshold,
        "variation": [{"factor": m.name, "unique_value_count": m.unique_value_count,
                       "variation_sufficient": m.variation_sufficient} for m in metas],
        "ranking": [_score_json(s) for s in scores],
    }
    with staged_output(out) as tmp:
        write_json(tmp / "scan.json", doc)
    return scores


def cluster_features(cfg, table):
    if cfg.cluster_features:
        missing = [f for f in cfg.cluster_features if f not in table.factors]
        if missing:
            raise ValueError(f"cluster feature(s) not in table: {missing}")
        return list(cfg.cluster_features)
    return [m.name for m in validate_variation(table, cfg.gam.k) if m.variation_sufficient]


def stage_cluster(cfg, out):
    table = analysis_table(cfg, out, "cluster")
    c = cfg.cluster
    try:
        feats = cluster_features(cfg, table)
        if not feats:
            raise ValueError("no clustering features")
        rows = table.usable.copy()
        for f in feats:
            rows &= ~np.isnan(table.factors[f])
        sub = table.subset(rows)
        scaled = standardize(sub, feats)
        X = scaled.matrix(feats)
        pca = fit_pca(X)
        ncomp = min(c.n_components, pca.n_components)
        scores = project(pca, X, ncomp)
        assign = select_model(scores, range(c.k_min, c.k_max + 1), c.families, seed=cfg.seed,
                              n_restarts=c.n_restarts)
        labels = relabel_by_response(assign.labels, sub.response)
        profiles = class_profile(labels, sub)
    except ValueError as exc:
        raise StageError("cluster", str(exc)) from exc
    except RuntimeError as exc:
        raise StageError("cluster", str(exc)) from exc
    doc = {
        "features": feats,
        "n_clustered": int(rows.sum()),
        "n_components": ncomp,
        "variance_explained": variance_explained(pca, ncomp),
        "eigenvalues": pca.eigenvalues.tolist(),
        "selected": {"K": assign.fit.K, "family": assign.fit.family, "bic": assign.bic,
                     "loglik": assign.fit.log_likelihood, "n_params": assign.fit.n_params},
        "classes": [{"label": class_letter(p.class_id), "size": p.size, "means": p.means,
                     "medians": p.medians} for p in profiles],
    }
    with staged_output(out) as tmp:
        write_csv(tmp / "pca_scores.csv",
                  ["neighborhood_id", *[f"pc{i + 1}" for i in range(ncomp)]],
                  [(nid, *row) for nid, row in zip(sub.ids, scores)])
        write_csv(tmp / "clusters.csv", ["neighborhood_id", "class_label"],
                  [(nid, class_letter(int(lab))) for nid, lab in zip(sub.ids, labels)])
        write_csv(tmp / "bic_table.csv", ["K", "family", "bic", "loglik", "n_params"],
                  [(r.K, r.family, r.bic, r.loglik, r.n_params) for r in assign.bic_table])
        write_json(tmp / "profiles.json", doc)
    return labels


def _selection_json(scope, n_rows, result, factors):
    return {
        "scope": scope,
        "n_rows": n_rows,
        "mode": result.mode,
        "exhaustive": result.exhaustive,
        "n_evaluated": result.n_evaluated,
        "candidate_factors": list(factors),
        "winner": None if result.winner is None else _score_json(result.winner),
        "ranked": [_score_json(s) for s in result.ranked],
    }


def select_for(table, cfg, overall):
    """Selection on one (sub)table: multi-factor search or single-factor scan."""
    s = cfg.selection
    factors = [m.name for m in validate_variation(table, cfg.gam.k) if m.variation_sufficient]
    if not factors:
        return SelectionResult(None, (), "single_factor", True, 0), factors
    n = int(table.usable.sum())
    if n < s.min_class_size:
        scores = single_factor_scan(table, factors, cfg.gam, s.threshold)
        return SelectionResult(pick_winner(scores), rank(scores), "single_factor", True,
                               len(scores)), factors
    groups = [g for g in cfg.exclusivity_groups if overall or g.scope == "all"]
    groups = [ExclusivityGroup(g.name, tuple(m for m in g.members if m in factors), g.scope)
              for g in groups if sum(m in factors for m in g.members) >= 2]
    return search_best_group(table, factors, groups, s.max_size, s.budget, cfg.gam,
                             s.threshold), factors


def stage_select(cfg, out):
    table = analysis_table(cfg, out, "select")
    _, rows = read_csv(_require(out / "clusters.csv", "select"))
    label_of = {r[0]: r[1] for r in rows}
    analyses = []
    try:
        res, factors = select_for(table, cfg, overall=True)
        analyses.append(_selection_json("all", int(table.usable.sum()), res, factors))
        for lab in sorted(set(label_of.values())):
            mask = np.array([label_of.get(i) == lab for i in table.ids])
            sub = table.subset(mask)
            res, factors = select_for(sub, cfg, overall=False)
            analyses.append(_selection_json(f"class_{lab}", int(sub.usable.sum()), res, factors))
    except ValueError as exc:
        raise StageError("select", str(exc)) from exc
    with staged_output(out) as tmp:
        write_json(tmp / "selection.json", {"threshold": cfg.selection.threshold,
                                            "analyses": analyses})
    return analyses


def stage_fit(cfg, out, factors=None):
    table = analysis_table(cfg, out, "fit")
    if factors is None:
        sel = read_json(_require(out / "selection.json", "fit"))
        win = sel["analyses"][0]["winner"]
        if win is None:
            raise StageError("fit", "selection.json has no winning group to fit")
        factors = win["factors"]
    try:
        fit = fit_gam(table, factors, config=cfg.gam)
        curves = [smooth_curve(fit, f) for f in factors]
    except (ValueError, KeyError) as exc:
        raise StageError("fit", str(exc)) from exc
    doc = {
        "link": fit.link,
        "n": fit.n,
        "intercept": fit.intercept,
        "deviance_explained": fit.deviance_explained,
        "hat_trace": fit.hat_trace,
        "scale": fit.scale,
        "gcv": fit.gcv,
        "terms": [{"name": t.name, "edf": t.edf, "p_value": t.p_value, "lambda": t.lam,
                   "ref_df": t.ref_df, "knots": t.knots.tolist()} for t in fit.terms],
    }
    with staged_output(out) as tmp:
        write_json(tmp / "gamfit.json", doc)
        (tmp / "curves").mkdir()
        for c in curves:
            write_csv(tmp / "curves" / f"{c.term}.csv", ["x", "fit", "lo", "hi"],
                      zip(c.x, c.fit, c.lower, c.upper))
    return fit


def build_report(cfg, out):
    prof = read_json(out / "profiles.json")
    sel = read_json(out / "selection.json")
    scan = read_json(out / "scan.json")
    _, var_rows = read_csv(out / "table.csv")
    report = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_rows": len(var_rows),
        "n_usable": sum(1 for r in var_rows if r[4] != ""),
        "scan_top": [{"factor": r["factors"][0], "deviance_explained": r["deviance_explained"],
                      "p_value": r["terms"][0]["p_value"] if r["terms"] else None}
                     for r in scan["ranking"][:5]],
        "clustering": {
            "K": prof["selected"]["K"], "family": prof["selected"]["family"],
            "bic": prof["selected"]["bic"],
            "variance_explained": prof["variance_explained"],
            "class_sizes": {c["label"]: c["size"] for c in prof["classes"]},
            "profiles": prof["classes"],
        },
        "selection": [{"scope": a["scope"], "mode": a["mode"], "n_rows": a["n_rows"],
                       "exhaustive": a["exhaustive"],
                       "winner": None if a["winner"] is None else a["winner"]["factors"],
                       "deviance_explained": None if a["winner"] is None
                       else a["winner"]["deviance_explained"]}
                      for a in sel["analyses"]],
    }
    if (out / "pollution_risk.csv").exists():
        report["pollution"] = {"factor": cfg.plume.factor_name, "sigma_km": cfg.plume.sigma_km}
        if (out / "sigma_tuning.csv").exists():
            _, rows = read_csv(out / "sigma_tuning.csv")
            chosen = [r for r in rows if r[2] == "true"]
            report["pollution"]["sigma_km"] = float(chosen[0][0])
            report["pollution"]["tuning"] = [{"sigma_km": float(r[0]),
                                              "correlation": float(r[1]) if r[1] else None}
                                             for r in rows]
    if (out / "gamfit.json").exists():
        g = read_json(out / "gamfit.json")
        report["fit"] = {"terms": [t["name"] for t in g["terms"]],
                         "deviance_explained": g["deviance_explained"]}
    return report


def run_pipeline(cfg, out=None):
    """Run every stage into ``out`` (default: the config's output directory).

    All files are produced in a scratch directory first; if any stage fails
    nothing is left behind and the error propagates as :class:`StageError`.
    """
    out = Path(out) if out is not None else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    with staged_output(out) as work:
        stage_ingest(cfg, work)
        if cfg.facilities:
            stage_pollution(cfg, work)
        stage_scan(cfg, work)
        stage_cluster(cfg, work)
        stage_select(cfg, work)
        sel = read_json(work / "selection.json")
        if sel["analyses"][0]["winner"] is not None:
            stage_fit(cfg, work)
        write_json(work / "report.json", build_report(cfg, work))
    return read_json(out / "report.json")
