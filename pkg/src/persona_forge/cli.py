"""Config-driven pipeline orchestration with reproducible stage artifacts."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, cf, ctr, features, ingest, mixture, synth

STAGES = ("synth", "ingest", "featurize", "cluster", "analyze", "ctr", "cf")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, stage: str, inputs: list[str],
                    outputs: list[str], seed: int, params: dict) -> None:
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": seed,
        "params": params,
        "inputs": {name: _sha256(out / name) for name in sorted(inputs)},
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }
    with open(out / f"manifest_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require(out: Path, name: str, stage: str) -> Path:
    path = out / name
    if not path.exists():
        raise DataError(f"stage {stage!r} requires missing artifact {name!r}")
    return path


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    for stage in config.get("stages", []):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
    return config


def _generator_config(section: dict, seed: int) -> synth.GeneratorConfig:
    mixtures = synth.default_mixtures()
    for ch, spec_dict in section.get("mixtures", {}).items():
        mixtures[ch] = synth.PlantedMixture(
            np.array(spec_dict["pi"]), np.array(spec_dict["theta"]),
            tuple(spec_dict.get("niche", ())))
    spend = None
    if section.get("price_mode", "tf") == "me":
        sm = section.get("spend_model")
        if sm is None:
            spend = synth.default_spend_model()
        else:
            spend = synth.SpendModel(np.array(sm["pi"]),
                                     np.array(sm["centers"]),
                                     tuple(sm.get("niche", ())))
    try:
        return synth.GeneratorConfig(
            n_users=int(section["n_users"]),
            months_per_user=int(section["months_per_user"]),
            seed=seed,
            mixtures=mixtures,
            spend_model=spend,
            price_mode=section.get("price_mode", "tf"),
            poisson_mean=section.get("poisson_mean", 8.0),
            migration_rate=section.get("migration_rate", 0.0),
            items_per_cell=int(section.get("items_per_cell", 2)),
        )
    except (KeyError, synth.GeneratorError) as exc:
        raise ConfigError(f"invalid synth config: {exc}") from None


def stage_synth(config: dict, out: Path, seed: int) -> None:
    section = config.get("synth", {})
    gen_cfg = _generator_config(section, seed)
    rs, gt = synth.generate(gen_cfg)
    ingest.write_log(rs, out / "log.csv")
    synth.write_ground_truth(gt, out / "ground_truth.csv")
    _write_manifest(out, "synth", [], ["log.csv", "ground_truth.csv"],
                    seed, section)


def stage_ingest(config: dict, out: Path, seed: int) -> None:
    section = config.get("ingest", {})
    source = section.get("input")
    if source:
        path = Path(source)
        if not path.exists():
            raise DataError(f"stage 'ingest' input file not found: {source}")
        inputs: list[str] = []
    else:
        path = _require(out, "log.csv", "ingest")
        inputs = ["log.csv"]
    try:
        result = ingest.parse_log(path)
    except ingest.IngestError as exc:
        raise DataError(str(exc)) from None
    rs = result.record_set
    if section.get("filter", True):
        rs = ingest.filter_inactive(rs)
    ingest.write_log(rs, out / "filtered.csv")
    with open(out / "ingest_diagnostics.json", "w", encoding="utf-8") as fh:
        json.dump([{"row": d.row, "message": d.message}
                   for d in result.diagnostics], fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "ingest", inputs,
                    ["filtered.csv", "ingest_diagnostics.json"], seed, section)


def _load_records(out: Path, stage: str) -> ingest.RecordSet:
    for name in ("filtered.csv", "log.csv"):
        if (out / name).exists():
            return ingest.parse_log(out / name).record_set
    raise DataError(f"stage {stage!r} requires 'filtered.csv' or 'log.csv'")


def stage_featurize(config: dict, out: Path, seed: int) -> None:
    rs = _load_records(out, "featurize")
    ti = features.tenure_align(rs)
    outputs = []
    for ch in features.CHARACTERIZATIONS:
        cm = features.aggregate(rs, ti, ch)
        name = f"features_{ch}.csv"
        features.write_matrix(cm, out / name)
        outputs += [name, name + ".json"]
    inputs = ["filtered.csv" if (out / "filtered.csv").exists() else "log.csv"]
    _write_manifest(out, "featurize", inputs, outputs, seed, {})


def _write_assignments(path: Path, keys, tau: np.ndarray,
                       hard: np.ndarray) -> None:
    k = tau.shape[1]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "month_index"]
                        + [f"tau_{j}" for j in range(k)] + ["hard"])
        for (user, month), row, label in zip(keys, tau, hard):
            writer.writerow([user, month] + [repr(float(v)) for v in row]
                            + [int(label)])


def read_assignments(path) -> tuple[list[tuple[str, int]], np.ndarray, np.ndarray]:
    keys, taus, hards = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for raw in reader:
            keys.append((raw[0], int(raw[1])))
            taus.append([float(v) for v in raw[2:-1]])
            hards.append(int(raw[-1]))
    return keys, np.array(taus), np.array(hards, dtype=np.int64)


def stage_cluster(config: dict, out: Path, seed: int) -> None:
    section = config.get("cluster", {})
    ks = dict(features.DEFAULT_K)
    ks.update(section.get("k", {}))
    restarts = int(section.get("restarts", 5))
    inputs, outputs = [], []
    try:
        for ch in features.CHARACTERIZATIONS:
            name = f"features_{ch}.csv"
            _require(out, name, "cluster")
            cm = features.read_matrix(out / name)
            inputs += [name, name + ".json"]
            if ch == "ME":
                model, hard = mixture.fit_kmeans(
                    cm.values, ks[ch],
                    mixture.KMeansConfig(restarts=restarts, seed=seed),
                    characterization=ch)
                tau = np.zeros((len(hard), ks[ch]))
                tau[np.arange(len(hard)), hard] = 1.0
            else:
                model, assign = mixture.fit_em(
                    cm.values, ks[ch],
                    mixture.EMConfig(restarts=restarts, seed=seed),
                    characterization=ch)
                tau, hard = assign.tau, assign.hard
            with open(out / f"model_{ch}.json", "w", encoding="utf-8") as fh:
                fh.write(mixture.model_to_json(model))
            _write_assignments(out / f"assignments_{ch}.csv", cm.keys, tau, hard)
            outputs += [f"model_{ch}.json", f"assignments_{ch}.csv"]
    except (ValueError, FloatingPointError) as exc:
        raise NumericalError(f"cluster stage failed: {exc}") from None
    _write_manifest(out, "cluster", inputs, outputs, seed,
                    {"k": ks, "restarts": restarts})


def _load_model(out: Path, ch: str, stage: str):
    path = _require(out, f"model_{ch}.json", stage)
    return mixture.model_from_json(path.read_text(encoding="utf-8"))


def stage_analyze(config: dict, out: Path, seed: int) -> None:
    section = config.get("analyze", {})
    inputs, outputs = [], []
    report: dict = {"dominance": {}, "migration_support": {}}

    stab = section.get("stability", {"characterization": "TF"})
    ch = stab.get("characterization", "TF")
    cm = features.read_matrix(_require(out, f"features_{ch}.csv", "analyze"))
    inputs += [f"features_{ch}.csv", f"features_{ch}.csv.json"]
    model = _load_model(out, ch, "analyze")
    k = model.k
    stability = analysis.stability_check(
        cm.values, k,
        epsilon=float(stab.get("epsilon", 0.05)),
        delta=float(stab.get("delta", 0.10)),
        runs=int(stab.get("runs", 4)),
        seed=seed,
        method="kmeans" if ch == "ME" else "em")
    report["stability"] = {
        "characterization": ch,
        "epsilon_observed": stability.epsilon_observed,
        "delta_observed": stability.delta_observed,
        "runs": stability.runs,
        "passed": stability.passed,
        "failed_runs": stability.failed_runs,
    }

    dom = section.get("dominance", {})
    kappa = float(dom.get("kappa", 0.02))
    k_max = int(dom.get("k_max", 6))
    for ch in features.CHARACTERIZATIONS:
        name = f"assignments_{ch}.csv"
        keys, tau, hard = read_assignments(_require(out, name, "analyze"))
        inputs.append(name)
        dom_report = analysis.dominance_check(hard, kappa, k_max,
                                              k=tau.shape[1])
        report["dominance"][ch] = {
            "passed": dom_report.passed,
            "shares": [round(float(s), 6) for s in dom_report.shares],
        }
        mig = analysis.migration_matrix(keys, hard, tau.shape[1], ch)
        report["migration_support"][ch] = int(mig.support.sum())
        with open(out / f"migration_{ch}.csv", "w", newline="\n",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"to_{j}" for j in range(tau.shape[1])])
            for row in mig.matrix:
                writer.writerow([repr(float(v)) for v in row])
        outputs.append(f"migration_{ch}.csv")

        model = _load_model(out, ch, "analyze")
        centers = model.theta if isinstance(model, mixture.MixtureModel) else model.centers
        table = analysis.center_report(centers,
                                       features.CHARACTERIZATION_LABELS[ch],
                                       as_percent=ch != "ME")
        with open(out / f"centers_{ch}.csv", "w", newline="\n",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerows(table)
        outputs.append(f"centers_{ch}.csv")
        inputs.append(f"model_{ch}.json")

    with open(out / "analyze_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append("analyze_report.json")
    _write_manifest(out, "analyze", sorted(set(inputs)), outputs, seed, section)


def _persona_features(out: Path, stage: str) -> ctr.UserPersonaFeatures:
    matrices = {}
    models = {}
    for ch in ctr.CTR_CHARACTERIZATIONS:
        matrices[ch] = features.read_matrix(
            _require(out, f"features_{ch}.csv", stage))
        models[ch] = _load_model(out, ch, stage)
    return ctr.persona_features(matrices, models)


def stage_ctr(config: dict, out: Path, seed: int) -> None:
    section = config.get("ctr", {})
    rs = _load_records(out, "ctr")
    persona = _persona_features(out, "ctr")
    recipes = section.get("recipes", [{"CR": "c", "DG": "c", "ME": "c"}])
    exp_cfg = ctr.CtrExperimentConfig(
        lam=float(section.get("lambda", 2e-3)),
        neg_ratio=int(section.get("neg_ratio", 5)),
        top_n=int(section.get("top_n", 20)),
        test_fraction=float(section.get("test_fraction", 0.2)),
        seed=seed)
    items = ctr.item_user_sets(rs)
    rows = []
    for recipe_dict in recipes:
        recipe = ctr.FeatureModeRecipe(dict(recipe_dict))
        evaluation = ctr.run_ctr_experiment(items, persona, recipe, exp_cfg)
        rows.append([recipe.mode("CR"), recipe.mode("DG"), recipe.mode("ME"),
                     repr(round(evaluation.mean_auc, 6)),
                     repr(round(evaluation.mean_n, 2)), evaluation.p,
                     repr(round(evaluation.complexity_proxy, 2))])
    with open(out / "ctr_eval.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["recency", "genre", "economic", "F", "n", "p",
                         "O_proxy"])
        writer.writerows(rows)
    inputs = ["filtered.csv" if (out / "filtered.csv").exists() else "log.csv"]
    inputs += [f"features_{ch}.csv" for ch in ctr.CTR_CHARACTERIZATIONS]
    inputs += [f"model_{ch}.json" for ch in ctr.CTR_CHARACTERIZATIONS]
    _write_manifest(out, "ctr", inputs, ["ctr_eval.csv"], seed, section)


def stage_cf(config: dict, out: Path, seed: int) -> None:
    section = config.get("cf", {})
    rs = _load_records(out, "cf")
    value = section.get("value", "count")
    pairs: dict[tuple[str, str], float] = {}
    for r in rs.records:
        key = (r.user_id, r.content_id)
        pairs[key] = pairs.get(key, 0.0) + (r.net_price if value == "spend"
                                            else 1.0)
    users = sorted({u for u, _ in pairs})
    items = sorted({i for _, i in pairs})
    u_idx = {u: j for j, u in enumerate(users)}
    i_idx = {i: j for j, i in enumerate(items)}
    ratings = [(u_idx[u], i_idx[i], v) for (u, i), v in sorted(pairs.items())]

    variant = section.get("variant", "vanilla")
    cluster_info = None
    inputs = ["filtered.csv" if (out / "filtered.csv").exists() else "log.csv"]
    if variant in ("a", "b", "d"):
        ch = section.get("characterization", "TF")
        name = f"assignments_{ch}.csv"
        keys, _, hard = read_assignments(_require(out, name, "cf"))
        inputs.append(name)
        label: dict[str, int] = {}
        for (user, month), lab in zip(keys, hard):
            if user not in label or month == 0:
                label[user] = int(lab)
        default = 0
        per_user = [label.get(u, default) for u in users]
        if variant == "d":
            cluster_info = {"partition": np.array(per_user)}
        else:
            cluster_info = {"memberships": [[v] for v in per_user]}
    elif variant == "c":
        ch = section.get("characterization", "TF")
        name = f"features_{ch}.csv"
        cm = features.read_matrix(_require(out, name, "cf"))
        inputs += [name, name + ".json"]
        pooled: dict[str, np.ndarray] = {}
        for (user, _), row in zip(cm.keys, cm.values):
            pooled[user] = pooled.get(user, 0) + row
        static = np.stack([pooled.get(u, np.zeros(cm.d)) for u in users])
        totals = static.sum(axis=1, keepdims=True)
        static = np.divide(static, totals, out=np.zeros_like(static),
                           where=totals > 0)
        cluster_info = {"static_features": static}

    cfg = cf.FactorConfig(
        f=int(section.get("f", 8)), lr=float(section.get("lr", 0.02)),
        reg=float(section.get("reg", 0.02)),
        epochs=int(section.get("epochs", 20)), seed=seed)
    try:
        model = cf.fit_factor(len(users), len(items), ratings, variant,
                              cluster_info, cfg)
    except cf.CfError as exc:
        raise NumericalError(f"cf stage failed: {exc}") from None
    with open(out / "cf_model.json", "w", encoding="utf-8") as fh:
        fh.write(cf.factor_model_to_json(model))
    _write_manifest(out, "cf", inputs, ["cf_model.json"], seed, section)


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "featurize": stage_featurize,
    "cluster": stage_cluster,
    "analyze": stage_analyze,
    "ctr": stage_ctr,
    "cf": stage_cf,
}


def run(config_path, out_dir=None, seed_override: int | None = None,
        only_stage: str | None = None) -> int:
    """Execute configured stages in dependency order; returns an exit code."""
    try:
        config = load_config(config_path)
        out = Path(out_dir or config.get("out_dir", "."))
        out.mkdir(parents=True, exist_ok=True)
        seed = int(config.get("seed", 0)) if seed_override is None else seed_override
        stages = [only_stage] if only_stage else config.get("stages", list(STAGES))
        for stage in stages:
            if stage not in STAGE_FUNCS:
                raise ConfigError(f"unknown stage {stage!r}")
            STAGE_FUNCS[stage](config, out, seed)
    except ConfigError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(json.dumps({"error": "numerical", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="persona-forge",
        description="Tenure-aligned persona segmentation and prediction "
                    "pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    only = None if args.command == "run" else args.command
    return run(args.config, args.out, args.seed, only)


if __name__ == "__main__":
    sys.exit(main())
