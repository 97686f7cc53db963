"""Command-line orchestrator for reproducible structure-property runs.

Subcommands: generate, stats, solve, sce, nce-train, nce-predict,
sensitivity, gamma, export-map.  A JSON config file (schema v1) carries the
experiment description; --set KEY=VALUE overrides config keys 1:1 through
dotted paths.  Exit codes: 0 success, 2 parameter/format error, 3 numerical
error.  Outputs are written atomically (temp file + rename); --threads 1
guarantees byte-identical reruns.
"""

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import correlations, gridfield, model, sce, sensitivity, solvers
from .errors import NCEError, NumericalError, ParameterError
from .kernels import MediumSpec, PropertyKind

_SCHEMA = {
    "v": int,
    "spec": {"kind": str, "prop0": float, "prop1": float, "k0": float,
             "loss": float},
    "generate": {"side": int, "base_seed": int, "seeds_per_setting": int,
                 "settings": list},
    "stats": {"order": int, "window_radius": float, "patch_side": int,
              "patch_count": int, "patch_seed": int},
    "solve": {"tol": float},
    "sce": {"order": int, "cavity_radius_cells": int},
    "train": {"lambda1": float, "lambda2": float, "lambda3": float,
              "order": int, "cavity_radius_cells": int, "step_size": float,
              "max_epochs": int, "grad_tol": float, "seed": int,
              "validation_fraction": float, "n_orders": int,
              "m_radial": int},
    "sensitivity": {"theta": float, "part": str, "space": str,
                    "cavity_radius_cells": int, "k0_ring_halfwidth": float},
    "out": str,
}


def _check_keys(doc, schema, path="config"):
    if isinstance(schema, dict):
        if not isinstance(doc, dict):
            raise ParameterError(f"{path} must be an object")
        for key, sub in doc.items():
            if key not in schema:
                raise ParameterError(f"unknown config key {path}.{key}")
            _check_keys(sub, schema[key], f"{path}.{key}")


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    _check_keys(doc, _SCHEMA)
    if doc.get("v") != 1:
        raise ParameterError("config schema version must be 1")
    return doc


def apply_overrides(doc, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise ParameterError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    _check_keys(doc, _SCHEMA)
    return doc


def _spec_from_config(doc):
    s = doc.get("spec", {})
    kind = PropertyKind(s.get("kind", "conduction"))
    return MediumSpec(kind, float(s.get("prop0", 5.0)),
                      float(s.get("prop1", 20.0)),
                      float(s.get("k0", 0.0)))


def _atomic_write(path, writer):
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return "%.12g" % x


def _run_pool(items, worker, threads):
    if threads <= 1:
        return [worker(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, items))


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(doc, out_dir, threads):
    gen = doc.get("generate", {})
    side = int(gen.get("side", 256))
    settings = gen.get("settings") or [
        {"corr_len_x": 0.0125, "corr_len_y": ly, "phi": 0.5}
        for ly in (0.0125, 0.03, 0.05, 0.08, 0.11, 0.15)]
    seeds = int(gen.get("seeds_per_setting", 20))
    base_seed = int(gen.get("base_seed", 1))
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    for i, st in enumerate(settings):
        for s in range(seeds):
            jobs.append((i, st, base_seed + 1000 * i + s))

    def worker(job):
        i, st, seed = job
        m = gridfield.generate_gaussian_levelset(
            seed, side, float(st["corr_len_x"]), float(st["corr_len_y"]),
            float(st.get("phi", 0.5)))
        name = f"field_s{i:02d}_r{seed:08d}.ncefld"
        _atomic_write(os.path.join(out_dir, name),
                      lambda tmp: gridfield.write_field(m, tmp))
        return (i, seed, gridfield.volume_fraction(m), name)

    rows = _run_pool(jobs, worker, threads)

    def write_manifest(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["setting", "seed", "phi", "file"])
            for r in rows:
                w.writerow([r[0], r[1], _fmt(r[2]), r[3]])

    _atomic_write(os.path.join(out_dir, "manifest.csv"), write_manifest)
    print(f"generated {len(rows)} fields in {out_dir}")
    return 0


def _manifest_fields(out_dir):
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_stats(doc, out_dir, threads):
    st = doc.get("stats", {})
    order = int(st.get("order", 2))
    window = st.get("window_radius", 0.25 if order == 3 else None)
    patch_side = int(st.get("patch_side", 64))
    patch_count = int(st.get("patch_count", 64))
    patch_seed = int(st.get("patch_seed", 424242))
    rows = _manifest_fields(out_dir)

    def worker(row):
        m = gridfield.read_field(os.path.join(out_dir, row["file"]))
        patches = gridfield.sample_patches(m, min(patch_side, m.side),
                                           patch_count, patch_seed)
        cs = correlations.average_correlations(patches, order, window)
        name = row["file"].replace(".ncefld", ".ncecor")
        _atomic_write(os.path.join(out_dir, name),
                      lambda tmp: correlations.write_correlations(cs, tmp))
        return name

    names = _run_pool(rows, worker, threads)
    print(f"wrote {len(names)} correlation sets")
    return 0


def cmd_solve(doc, out_dir, threads, tol):
    spec = _spec_from_config(doc)
    tol = tol if tol is not None else float(doc.get("solve", {}).get("tol", 1e-9))
    loss = float(doc.get("spec", {}).get("loss", 0.0))
    rows = _manifest_fields(out_dir)

    def worker(row):
        m = gridfield.read_field(os.path.join(out_dir, row["file"]))
        try:
            if spec.kind is PropertyKind.CONDUCTION:
                te = solvers.effective_conductivity(m, spec.prop0, spec.prop1, tol)
            else:
                te = solvers.effective_permittivity(m, spec.prop0, spec.prop1,
                                                    spec.k0, tol, loss)
            mat = te.m
            return (row["file"], "ok", mat)
        except NumericalError as exc:
            return (row["file"], f"error: {exc}", None)

    results = _run_pool(rows, worker, threads)

    def write_targets(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "status", "xx_re", "xx_im", "xy_re", "xy_im",
                        "yy_re", "yy_im"])
            for name, status, mat in results:
                if mat is None:
                    w.writerow([name, status] + [""] * 6)
                else:
                    mat = np.asarray(mat, dtype=complex)
                    w.writerow([name, status,
                                _fmt(mat[0, 0].real), _fmt(mat[0, 0].imag),
                                _fmt(mat[0, 1].real), _fmt(mat[0, 1].imag),
                                _fmt(mat[1, 1].real), _fmt(mat[1, 1].imag)])

    _atomic_write(os.path.join(out_dir, "targets.csv"), write_targets)
    n_bad = sum(1 for r in results if r[2] is None)
    print(f"solved {len(results) - n_bad}/{len(results)} fields")
    return 0


def _load_dataset(doc, out_dir):
    spec = _spec_from_config(doc)
    targets = {}
    with open(os.path.join(out_dir, "targets.csv"), newline="",
              encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["status"] != "ok":
                continue
            mat = np.array(
                [[complex(float(row["xx_re"]), float(row["xx_im"])),
                  complex(float(row["xy_re"]), float(row["xy_im"]))],
                 [complex(float(row["xy_re"]), float(row["xy_im"])),
                  complex(float(row["yy_re"]), float(row["yy_im"]))]])
            if np.max(np.abs(mat.imag)) == 0.0:
                mat = mat.real
            targets[row["file"]] = sce.EffectiveTensor(mat, spec.kind)
    records = []
    for row in _manifest_fields(out_dir):
        if row["file"] not in targets:
            continue
        cs = correlations.read_correlations(
            os.path.join(out_dir, row["file"].replace(".ncefld", ".ncecor")))
        records.append((cs, targets[row["file"]]))
    return model.Dataset(records, spec), spec


def cmd_sce(doc, out_dir, threads):
    spec = _spec_from_config(doc)
    conf = doc.get("sce", {})
    order = int(conf.get("order", 2))
    cavity = int(conf.get("cavity_radius_cells", 1))
    rows = _manifest_fields(out_dir)

    def worker(row):
        cs = correlations.read_correlations(
            os.path.join(out_dir, row["file"].replace(".ncefld", ".ncecor")))
        te = sce.predict(cs, spec, order=order, cavity_radius_cells=cavity)
        return (row["file"], np.asarray(te.m, dtype=complex))

    results = _run_pool(rows, worker, threads)

    def write_csv(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "xx_re", "xx_im", "xy_re", "xy_im",
                        "yy_re", "yy_im"])
            for name, mat in results:
                w.writerow([name,
                            _fmt(mat[0, 0].real), _fmt(mat[0, 0].imag),
                            _fmt(mat[0, 1].real), _fmt(mat[0, 1].imag),
                            _fmt(mat[1, 1].real), _fmt(mat[1, 1].imag)])

    _atomic_write(os.path.join(out_dir, f"sce_order{order}.csv"), write_csv)
    print(f"predicted {len(results)} fields at order {order}")
    return 0


def _train_config(doc):
    t = doc.get("train", {})
    return model.TrainConfig(
        lambda1=float(t.get("lambda1", 1e-4)),
        lambda2=float(t.get("lambda2", 1e-2)),
        lambda3=float(t.get("lambda3", 1e-2)),
        order=int(t.get("order", 2)),
        cavity_radius_cells=int(t.get("cavity_radius_cells", 2)),
        step_size=float(t.get("step_size", 0.02)),
        max_epochs=int(t.get("max_epochs", 200)),
        grad_tol=float(t.get("grad_tol", 1e-7)),
        seed=int(t.get("seed", 0)),
        validation_fraction=float(t.get("validation_fraction", 0.2)),
    ), int(t.get("n_orders", 4)), int(t.get("m_radial", 8))


def cmd_nce_train(doc, out_dir, threads):
    ds, spec = _load_dataset(doc, out_dir)
    cfg, n_orders, m_radial = _train_config(doc)
    km, history = model.train(ds, spec, cfg, n_orders, m_radial)
    _atomic_write(os.path.join(out_dir, "kernel.ncekrn"),
                  lambda tmp: model.write_kernel(km, tmp, spec, cfg))
    _atomic_write(os.path.join(out_dir, "history.csv"),
                  lambda tmp: history.to_csv(tmp))
    print(f"trained kernel on {len(ds)} records, {len(history)} epochs")
    return 0


def cmd_nce_predict(doc, out_dir, threads):
    spec = _spec_from_config(doc)
    km, _ = model.read_kernel(os.path.join(out_dir, "kernel.ncekrn"))
    conf = doc.get("sce", {})
    order = int(conf.get("order", 2))
    cavity = int(conf.get("cavity_radius_cells", 2))
    rows = _manifest_fields(out_dir)

    def worker(row):
        cs = correlations.read_correlations(
            os.path.join(out_dir, row["file"].replace(".ncefld", ".ncecor")))
        te = model.nce_predict(km, cs, spec, order, cavity)
        return (row["file"], np.asarray(te.m, dtype=complex))

    results = _run_pool(rows, worker, threads)

    def write_csv(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "xx_re", "xx_im", "xy_re", "xy_im",
                        "yy_re", "yy_im"])
            for name, mat in results:
                w.writerow([name,
                            _fmt(mat[0, 0].real), _fmt(mat[0, 0].imag),
                            _fmt(mat[0, 1].real), _fmt(mat[0, 1].imag),
                            _fmt(mat[1, 1].real), _fmt(mat[1, 1].imag)])

    _atomic_write(os.path.join(out_dir, "nce_predictions.csv"), write_csv)
    print(f"predicted {len(results)} fields with the learned kernel")
    return 0


def cmd_sensitivity(doc, out_dir, threads, compare=None):
    spec = _spec_from_config(doc)
    conf = doc.get("sensitivity", {})
    theta = float(conf.get("theta", 0.0))
    part = conf.get("part", "re")
    space = conf.get("space", "real")
    cavity = int(conf.get("cavity_radius_cells", 2))
    rows = _manifest_fields(out_dir)
    base = correlations.read_correlations(
        os.path.join(out_dir, rows[0]["file"].replace(".ncefld", ".ncecor")))

    fn = sensitivity.sensitivity_s2 if space == "real" \
        else sensitivity.sensitivity_psd
    sources = (compare or "analytic").split(",")
    maps = {}
    for src in sources:
        if src == "analytic":
            kern = None
        elif src == "learned":
            km, _ = model.read_kernel(os.path.join(out_dir, "kernel.ncekrn"))
            kern = model.LearnedKernel(km, spec)
        else:
            raise ParameterError(f"unknown sensitivity source {src!r}")
        smap = fn(kern, spec, base, theta, part=part,
                  cavity_radius_cells=cavity)
        maps[src] = smap
        stem = os.path.join(out_dir, f"sens_{src}_{space}_{part}")
        _atomic_write(stem + ".csv", lambda tmp, s=smap: sensitivity.map_to_csv(s, tmp))
        _atomic_write(stem + ".pgm", lambda tmp, s=smap: sensitivity.map_to_pgm(s, tmp))
    if len(maps) == 2:
        a, b = (maps[s].values for s in sources)
        dist = float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))
        print(f"normalized L2 distance {sources[0]} vs {sources[1]}: {dist:.6f}")
    print(f"wrote {len(maps)} sensitivity map(s)")
    return 0


def cmd_gamma(doc, out_dir, threads, seed):
    os.makedirs(out_dir, exist_ok=True)
    r0 = 0.1
    side = 256
    rows = []
    for n in range(2, 7):
        samples = min(20_000_000, max(200_000, int(50.0 / (math.pi * r0**2) ** (n - 1))))
        est = sensitivity.connected_fraction(side, r0, n, samples, seed + n)
        rows.append((n, est.value, est.ci_low, est.ci_high, est.samples))

    def write_csv(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n_points", "gamma", "ci_low", "ci_high", "samples"])
            for r in rows:
                w.writerow([r[0], _fmt(r[1]), _fmt(r[2]), _fmt(r[3]), r[4]])

    _atomic_write(os.path.join(out_dir, "gamma.csv"), write_csv)
    print(f"estimated gamma(N) for N = 2..6 at r0 = {r0}")
    return 0


def cmd_export_map(args):
    smap = _read_map_csv(args.input)
    sensitivity.map_to_pgm(smap, args.output)
    print(f"wrote {args.output}")
    return 0


def _read_map_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    side = int(math.isqrt(len(rows)))
    if side * side != len(rows):
        raise ParameterError("map CSV does not hold a square grid")
    values = np.array([float(r[2]) for r in rows]).reshape(side, side)
    space = "fourier" if header[0] == "kx" else "real"
    return sensitivity.SensitivityMap(values=values, space=space, theta=0.0,
                                      part="re", source_kernel=sce.KernelSource.ANALYTIC,
                                      side=side)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="nce",
        description="structure-property experiments on bi-phase random media")
    parser.add_argument("--config", help="JSON experiment config (schema v1)")
    parser.add_argument("--out", help="output directory (default from config)")
    parser.add_argument("--seed", type=int, default=1, help="base RNG seed")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("NCE_THREADS", "1")),
                        help="worker threads (1 = bitwise deterministic)")
    parser.add_argument("--tol", type=float, default=None,
                        help="solver tolerance override")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "stats", "solve", "sce", "nce-train",
                 "nce-predict", "gamma"):
        sub.add_parser(name)
    p_sens = sub.add_parser("sensitivity")
    p_sens.add_argument("--compare", help="comma list: analytic,learned")
    p_exp = sub.add_parser("export-map")
    p_exp.add_argument("input")
    p_exp.add_argument("output")

    args = parser.parse_args(argv)
    try:
        doc = load_config(args.config) if args.config else {"v": 1}
        doc = apply_overrides(doc, args.set)
        out_dir = args.out or doc.get("out", "runs")
        if args.command == "generate":
            return cmd_generate(doc, out_dir, args.threads)
        if args.command == "stats":
            return cmd_stats(doc, out_dir, args.threads)
        if args.command == "solve":
            return cmd_solve(doc, out_dir, args.threads, args.tol)
        if args.command == "sce":
            return cmd_sce(doc, out_dir, args.threads)
        if args.command == "nce-train":
            return cmd_nce_train(doc, out_dir, args.threads)
        if args.command == "nce-predict":
            return cmd_nce_predict(doc, out_dir, args.threads)
        if args.command == "sensitivity":
            return cmd_sensitivity(doc, out_dir, args.threads, args.compare)
        if args.command == "gamma":
            return cmd_gamma(doc, out_dir, args.threads, args.seed)
        if args.command == "export-map":
            return cmd_export_map(args)
        raise ParameterError(f"unknown command {args.command}")
    except (ParameterError, FileNotFoundError, KeyError) as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except NCEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
