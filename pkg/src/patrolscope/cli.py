"""``patrolscope <subcommand> --config run.json [--set key=value ...]``

Each stage reads its inputs from the manifest (or the synthetic corpus under
``<output_dir>/corpus``) and from earlier stages' artifacts in the output
directory, and writes its own artifacts there. Every CSV begins with a
``# config_hash=...`` line. ``run_report.json`` accumulates per-stage counts
and timings; a failing stage leaves a ``FAILED`` marker next to whatever it
had already written.

Exit codes: 0 ok, 1 input or configuration error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._parallel import WORKERS_ENV, resolve_workers
from .config import ConfigError, config_hash, load_config, parse_override
from .corpus import (
    CorpusError,
    StudyWindow,
    blockgroups_frame,
    load_blockgroups,
    load_geofences,
    load_manifest,
    load_pings,
    load_table,
    read_csv_skipping_header_comments,
)
from .econometrics import (
    RankDeficientError,
    analysis_frame,
    arrests_per_hour,
    city_validation_suite,
    extreme_quantile_comparison,
    fit_ols,
    shift_hour_disparities,
    table1_specs,
    table2_specs,
    variance_decomposition,
)
from .econometrics.analysis import elasticity_arsinh
from .econometrics.models import ModelSpec
from .officers import OfficerIdentifier, infer_homes
from .presence import PresenceAggregator
from .shifts import ShiftDetector, patrol_pings_frame, shift_statistics, shifts_frame, shifts_from_frames
from .synth import SynthSpec, generate

logger = logging.getLogger("patrolscope")

STAGES = ("validate", "synth", "qualify", "homes", "shifts", "presence", "regress", "validate-city")
PRODUCER = {
    "qualifications.csv": "qualify",
    "homes.csv": "homes",
    "shifts.csv": "shifts",
    "patrol_pings.csv": "shifts",
    "presence.csv": "presence",
    "corpus/manifest.json": "synth",
}


class MissingArtifactError(ConfigError):
    pass


class Run:
    """Paths, config and report shared by the stages of one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        self.n_jobs = resolve_workers(cfg["workers"])
        self._pings = None
        self._manifest = None
        report_path = self.out / "run_report.json"
        self.report = {}
        if report_path.exists():
            try:
                self.report = json.loads(report_path.read_text())
            except json.JSONDecodeError:
                self.report = {}
        if self.report.get("config_hash") != self.hash:
            self.report = {}
        self.report.update({"config_hash": self.hash, "version": __version__})
        self.report.setdefault("stages", {})

    # -- artifacts ---------------------------------------------------------

    def write_csv(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={self.hash}\n")
            frame.to_csv(fh, index=False, lineterminator="\n")
        return path

    def write_json(self, obj, name: str) -> Path:
        path = self.out / name
        with open(path, "w") as fh:
            json.dump({"config_hash": self.hash, **obj}, fh, indent=1, sort_keys=True,
                      default=_json_default)
            fh.write("\n")
        return path

    def write_text(self, text: str, name: str) -> Path:
        path = self.out / name
        path.write_text(f"# config_hash={self.hash}\n{text}\n")
        return path

    def artifact(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise MissingArtifactError(
                f"missing artifact {name} in {self.out}: run `patrolscope {PRODUCER[name]}` first")
        return path

    def read_csv(self, name: str, **kwargs) -> pd.DataFrame:
        dtype = {c: str for c in ("device_id", "city_id", "bg_id", "shift_id", "month",
                                  "home_cell", "station_in", "station_out", "zip")}
        return read_csv_skipping_header_comments(self.artifact(name), dtype=dtype, **kwargs)

    # -- inputs ------------------------------------------------------------

    @property
    def synth_spec(self) -> SynthSpec | None:
        if self.cfg["synth"] is None:
            return None
        d = dict(self.cfg["synth"])
        d.setdefault("rng_seed", self.cfg["rng_seed"])
        return SynthSpec.from_dict(d)

    @property
    def window(self) -> StudyWindow:
        if self.cfg["window"] is not None:
            return StudyWindow.from_dict(self.cfg["window"])
        if self.synth_spec is not None:
            return self.synth_spec.window
        raise ConfigError("config needs a window (or a synth block that implies one)")

    @property
    def manifest(self) -> dict[str, Path]:
        if self._manifest is None:
            if self.cfg["manifest"] is not None:
                path = Path(self.cfg["manifest"])
                if not path.exists():
                    raise ConfigError(f"manifest not found: {path}")
            else:
                path = self.artifact("corpus/manifest.json")
            self._manifest = load_manifest(path)
        return self._manifest

    def input_path(self, key: str, required=True) -> Path | None:
        path = self.manifest.get(key)
        if path is None or not path.exists():
            if required:
                raise ConfigError(f"input {key!r} missing from the manifest or not found"
                                  + (f": {path}" if path else ""))
            return None
        return path

    def table(self, key: str) -> pd.DataFrame | None:
        path = self.input_path(key, required=False)
        return load_table(path) if path is not None else None

    def pings(self):
        if self._pings is None:
            self._pings = load_pings(self.input_path("pings"), self.window,
                                     self.cfg["max_reject_rate"])
        return self._pings

    def stations(self):
        return load_geofences(self.input_path("geofences"))

    def blockgroups(self):
        return load_blockgroups(self.input_path("blockgroups_geometry"),
                                self.input_path("blockgroups_attributes", required=False))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, pd.DataFrame):
        return o.to_dict("records")
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ----------------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------------

def stage_validate(run: Run) -> dict:
    frame, rep = run.pings()
    stations = run.stations()
    bgs, bg_rep = run.blockgroups()
    rejects = pd.DataFrame(rep.rejects, columns=["line_no", "reason"])
    run.write_csv(rejects, "rejects.csv")
    counts = {"pings": rep.to_dict(), "stations": len(stations), "blockgroups": bg_rep.to_dict(),
              "devices": int(frame["device_id"].nunique())}
    run.write_json(counts, "validate_report.json")
    return {"rows": rep.n_rows, "kept": rep.n_kept, "rejects": len(rep.rejects),
            "stations": len(stations), "blockgroups": len(bgs)}


def stage_synth(run: Run) -> dict:
    spec = run.synth_spec
    if spec is None:
        raise ConfigError("`synth` needs a synth block in the config")
    corpus = generate(spec, n_jobs=run.n_jobs)
    corpus.write(run.out / "corpus")
    for path in sorted((run.out / "corpus").glob("*.csv")):
        body = path.read_text()
        path.write_text(f"# config_hash={run.hash}\n{body}")
    return {"pings": len(corpus.pings), "officers": len(corpus.truth.officer_ids),
            "devices": int(corpus.pings["device_id"].nunique()),
            "truth_shifts": len(corpus.truth.shifts)}


def stage_qualify(run: Run) -> dict:
    pings, _ = run.pings()
    t = run.cfg["thresholds"]
    oi = OfficerIdentifier(stations=run.stations(), window=run.window,
                           station_days_min=t["station_days_min"],
                           local_time=run.cfg["qualify"]["local_time"], n_jobs=run.n_jobs)
    oi.fit(pings)
    run.write_csv(oi.qualifications_, "qualifications.csv")
    return {"devices": oi.n_devices_, "device_months": len(oi.qualifications_),
            "qualified_months": int(oi.qualifications_["qualified"].sum()),
            "officers": len(oi.officer_ids_)}


def _qualifications(run: Run) -> pd.DataFrame:
    q = run.read_csv("qualifications.csv")
    q["qualified"] = q["qualified"].astype(str).str.lower().isin(["true", "1"])
    q["station_days"] = q["station_days"].astype(int)
    return q


def stage_homes(run: Run) -> dict:
    pings, _ = run.pings()
    homes = infer_homes(pings, run.stations(), run.window, _qualifications(run),
                        local_time=run.cfg["qualify"]["local_time"], n_jobs=run.n_jobs)
    run.write_csv(homes, "homes.csv")
    return {"homes": len(homes), "devices": int(homes["device_id"].nunique()),
            "h1": int((homes["half"] == "H1").sum()), "h2": int((homes["half"] == "H2").sum())}


def stage_shifts(run: Run) -> dict:
    pings, _ = run.pings()
    t, s = run.cfg["thresholds"], run.cfg["shifts"]
    homes = run.read_csv("homes.csv")
    homes["support"] = homes["support"].astype(int)
    det = ShiftDetector(stations=run.stations(), window=run.window,
                        shift_min_h=t["shift_min_h"], bracket_max_h=t["bracket_max_h"],
                        shift_max_h=s["shift_max_h"], same_station=s["same_station"],
                        local_time=run.cfg["qualify"]["local_time"], n_jobs=run.n_jobs)
    det.fit(qualifications=_qualifications(run), homes=homes)
    shifts = det.transform(pings)
    run.write_csv(shifts_frame(shifts), "shifts.csv")
    run.write_csv(patrol_pings_frame(shifts), "patrol_pings.csv")
    stats = shift_statistics(shifts) or {"n_shifts": 0}
    return stats


def _shifts(run: Run):
    table = run.read_csv("shifts.csv")
    pings = run.read_csv("patrol_pings.csv")
    return shifts_from_frames(table, pings)


def stage_presence(run: Run) -> dict:
    bgs, _ = run.blockgroups()
    p = run.cfg["presence"]
    agg = PresenceAggregator(blockgroups=bgs, window=run.window,
                             speed_cap_mph=run.cfg["thresholds"]["speed_cap_mph"],
                             exclude_weekday_9to5=p["exclude_weekday_9to5"],
                             local_time=p["local_time"], speed_reference=p["speed_reference"],
                             n_jobs=run.n_jobs).fit()
    cells = agg.transform(_shifts(run))
    run.write_csv(cells, "presence.csv")
    rep = agg.report_.to_dict()
    run.write_json({"presence": rep}, "presence_report.json")
    return {k: rep[k] for k in ("n_shifts", "n_pings", "n_speed_excluded", "n_time_excluded",
                                "n_unassigned", "unassigned_hours")} | {
        "blockgroups": len(cells), "total_hours": float(cells["hours"].sum())}


def _model_specs(run: Run) -> tuple[list[ModelSpec], bool]:
    models = run.cfg["models"]
    if isinstance(models, list):
        return [ModelSpec.from_dict(m) for m in models], False
    specs = table1_specs() if "table1" in models else []
    return specs, "table2" in models


def stage_regress(run: Run) -> dict:
    cells = run.read_csv("presence.csv")
    bgs, _ = run.blockgroups()
    city = run.table("city_table")
    if city is None:
        raise ConfigError("regress needs a city_table input (city shares for relative shares)")
    data = analysis_frame(cells, blockgroups_frame(bgs), city, run.table("department_table"))
    run.write_csv(data, "analysis_frame.csv")
    specs, with_table2 = _model_specs(run)
    fitted, skipped, coef_rows, elasticity_rows = [], [], [], []

    def fit_all(frame, specs, prefix=""):
        for spec in specs:
            name = prefix + spec.name
            try:
                res = fit_ols(frame, spec)
            except (RankDeficientError, KeyError, ValueError) as e:
                skipped.append({"model": name, "reason": str(e)})
                continue
            fitted.append(name)
            tab = res.to_frame()
            tab.insert(0, "model", name)
            tab["n_obs"] = res.n_obs
            tab["r_squared"] = res.r_squared
            coef_rows.append(tab)
            run.write_text(res.to_text(), f"regression_{name}.txt")
            if spec.transform == "arsinh" and res.outcome_mean_levels > 0:
                for term in spec.regressors:
                    if term in res.regressor_means.index and term in res.params.index:
                        x_mean = float(res.regressor_means[term])
                        elasticity_rows.append({
                            "model": name, "term": term, "y_mean": res.outcome_mean_levels,
                            "x_mean": x_mean, "beta": float(res.params[term]),
                            "elasticity": elasticity_arsinh(res.outcome_mean_levels, x_mean,
                                                            float(res.params[term]))})

    fit_all(data, specs)
    if with_table2:
        for key in ("arrests", "stops"):
            actions = run.table(key)
            if actions is None:
                skipped.append({"model": f"{key}_*", "reason": f"no {key} table"})
                continue
            ratio = arrests_per_hour(cells, actions)
            frame = data.merge(ratio[["bg_id", "actions", "actions_per_hour"]], on="bg_id", how="left")
            fit_all(frame, table2_specs(), prefix=f"{key}_")

    coefs = pd.concat(coef_rows, ignore_index=True) if coef_rows else \
        pd.DataFrame(columns=["model", "term", "coefficient", "se", "p", "stars", "n_obs", "r_squared"])
    run.write_csv(coefs, "regressions.csv")
    run.write_csv(pd.DataFrame(elasticity_rows, columns=["model", "term", "y_mean", "x_mean",
                                                         "beta", "elasticity"]), "elasticities.csv")
    extras = {}
    for name, fn in (("variance_decomposition", lambda: variance_decomposition(data, "hours")),
                     ("extreme_quantiles", lambda: extreme_quantile_comparison(data, "hours")),
                     ("shift_hour_disparities", lambda: shift_hour_disparities(data))):
        try:
            run.write_csv(fn(), f"{name}.csv")
            extras[name] = "ok"
        except (RankDeficientError, KeyError, ValueError) as e:
            skipped.append({"model": name, "reason": str(e)})
            extras[name] = "skipped"
    run.write_json({"fitted": fitted, "skipped": skipped}, "regress_report.json")
    return {"models_fitted": len(fitted), "models_skipped": len(skipped), **extras}


def stage_validate_city(run: Run) -> dict:
    from .corpus import BlockGroupIndex
    from .geo import geohash_center
    from .officers import HomeLocation, impute_device_race

    cells = run.read_csv("presence.csv")
    shifts = run.read_csv("shifts.csv")
    quals = _qualifications(run)
    homes = run.read_csv("homes.csv")
    bgs, _ = run.blockgroups()
    index = BlockGroupIndex(bgs)
    city_table = run.table("city_table")

    officers = quals[quals["qualified"]]
    device_city = (officers.groupby(["device_id", "city_id"]).size().rename("n").reset_index()
                   .sort_values(["device_id", "n", "city_id"], ascending=[True, False, True])
                   .drop_duplicates("device_id").set_index("device_id")["city_id"])
    first_home = (homes.sort_values(["device_id", "half"]).drop_duplicates("device_id")
                  .set_index("device_id"))
    rows, zip_rows = [], []
    crosswalk = run.table("zip_crosswalk")
    zip_of = dict(zip(crosswalk["bg_id"].astype(str), crosswalk["zip"].astype(str))) \
        if crosswalk is not None else None
    for device_id, cid in device_city.items():
        if device_id not in first_home.index:
            continue
        h = first_home.loc[device_id]
        vec = impute_device_race(HomeLocation(device_id, h["half"], h["home_cell"],
                                              int(h["support"])), index)
        if vec is not None:
            rows.append({"city_id": cid, **dict(zip(("pct_white", "pct_black", "pct_hispanic",
                                                     "pct_asian"), vec))})
        if zip_of is not None:
            c = geohash_center(h["home_cell"])
            k = int(index.locate(np.array([c.lon]), np.array([c.lat]))[0])
            if k >= 0 and bgs[k].bg_id in zip_of:
                zip_rows.append({"device_id": device_id, "zip": zip_of[bgs[k].bg_id]})
    smartphone = (pd.DataFrame(rows).groupby("city_id", sort=True).mean().reset_index()
                  if rows else None)
    report = city_validation_suite(
        cells, shifts, quals,
        city_table=city_table,
        employee_counts=run.table("employee_counts"),
        department_composition=run.table("department_table"),
        smartphone_composition=smartphone,
        zip_residents=run.table("zip_residents"),
        device_zips=pd.DataFrame(zip_rows, columns=["device_id", "zip"]) if zip_of is not None else None,
        bg_frame=blockgroups_frame(bgs),
        arrests=run.table("arrests"),
        stops=run.table("stops"),
    )
    if smartphone is not None:
        run.write_csv(smartphone, "smartphone_composition.csv")
    run.write_csv(report.pop("city_counts"), "city_counts.csv")
    run.write_json(report, "validate_city_report.json")
    return {"checks": sorted(report["checks"]), "skipped": report["skipped"]}


STAGE_FUNCS = {
    "validate": stage_validate,
    "synth": stage_synth,
    "qualify": stage_qualify,
    "homes": stage_homes,
    "shifts": stage_shifts,
    "presence": stage_presence,
    "regress": stage_regress,
    "validate-city": stage_validate_city,
}


def run_stage(run: Run, name: str) -> dict:
    start = time.perf_counter()
    counts = STAGE_FUNCS[name](run)
    run.report["stages"][name] = {"counts": counts,
                                  "seconds": round(time.perf_counter() - start, 3)}
    _save_report(run)
    logger.info("%s: %s", name, counts)
    return counts


def _save_report(run: Run) -> None:
    run.report["workers"] = run.n_jobs
    with open(run.out / "run_report.json", "w") as fh:
        json.dump(run.report, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def stages_for(command: str, cfg: dict) -> list[str]:
    if command != "all":
        return [command]
    chain = ["synth"] if cfg["synth"] is not None and cfg["manifest"] is None else []
    return chain + ["validate", "qualify", "homes", "shifts", "presence", "regress",
                    "validate-city"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patrolscope", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"patrolscope {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")
        sp.add_argument("--out", help="output directory (config output_dir)")
        sp.add_argument("--manifest", help="input manifest (config manifest)")
        sp.add_argument("--seed", type=int, help="config rng_seed")
        sp.add_argument("--workers", type=int,
                        help=f"worker processes (config workers; default ${WORKERS_ENV} or 1)")
        sp.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        from .config import schema
        print(json.dumps(schema(), indent=2))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    stage = None
    try:
        overrides = [parse_override(o) for o in args.overrides]
        for flag, key in (("out", "output_dir"), ("manifest", "manifest"),
                          ("seed", "rng_seed"), ("workers", "workers")):
            value = getattr(args, flag)
            if value is not None:
                if flag in ("out", "manifest"):
                    value = str(Path(value).resolve())
                overrides.append(([key], value))
        cfg = load_config(args.config, overrides)
        run = Run(cfg)
        (run.out / "FAILED").unlink(missing_ok=True)
        for stage in stages_for(args.command, cfg):
            run_stage(run, stage)
        return 0
    except (ConfigError, CorpusError, FileNotFoundError) as e:
        _fail(run, stage, e)
        print(f"patrolscope: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        _fail(run, stage, e)
        print(f"patrolscope: internal error in stage {stage}: {e!r}", file=sys.stderr)
        traceback.print_exc()
        return 2


def _fail(run: Run | None, stage, err) -> None:
    if run is None:
        return
    (run.out / "FAILED").write_text(f"stage={stage}\nerror={type(err).__name__}: {err}\n")
    run.report["stages"][stage or "<setup>"] = {"failed": f"{type(err).__name__}: {err}"}
    _save_report(run)


if __name__ == "__main__":
    sys.exit(main())
