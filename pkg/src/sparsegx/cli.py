"""Command-line entry point: ``sparsegx <command> [options]``.

Every command writes its outputs atomically into ``--out`` and then a
``manifest.json`` recording inputs (with SHA-256 digests), the
configuration snapshot, seed, version, timestamps and the output list.
Primary outputs depend only on inputs, configuration and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import _kernels as K_
from . import dataset as ds
from . import factor as fa
from . import oracle as orc
from . import sampler as sm
from . import signature as sg
from . import summary as su
from ._io import atomic_write_text, save_npz, sha256_file
from .config import Config, ConfigError, HyperParameters, config_to_dict, load_config, validate

logger = logging.getLogger("sparsegx")

THREADS_ENV = "SPARSEGX_THREADS"
FIXTURES = {"none": K_.VARIANT_OK, "tau": K_.VARIANT_BAD_TAU,
            "inclusion": K_.VARIANT_BAD_INCLUSION}
# hyperparameters under which the joint-distribution chain mixes in 1e5 sweeps
MIXING_HYPERPARAMETERS = HyperParameters(r=0.3, s=4.0, psi_shape=3.0, psi_rate=1.0)
EXIT_FAIL, EXIT_ERROR = 1, 2
GOLDEN_DIMS = (2, 6, 3)  # p, n, K of the golden exact-posterior instance


class CommandError(Exception):
    """A user-facing failure reported without a traceback."""


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args, cfg: Config, seed: int):
        self.command = command
        self.out = Path(args.out)
        self.cfg = cfg
        self.seed = seed
        self.inputs: list = []
        self.outputs: list = []
        self.started = _now()
        self.argv = list(getattr(args, "argv", sys.argv[1:]))

    def input(self, path):
        if path is None:
            return None
        p = Path(path)
        if not p.is_file():
            raise CommandError(f"input file not found: {p}")
        self.inputs.append(p)
        return p

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        self.outputs.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        atomic_write_text(p, text)
        return p

    def finish(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.seed,
            "config": config_to_dict(self.cfg),
            "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in self.inputs],
            "outputs": [{"path": str(p), "sha256": sha256_file(p)}
                        for p in self.outputs if p.exists()],
            "started": self.started,
            "finished": _now(),
        }
        if extra:
            manifest["result"] = extra
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.out / "manifest.json",
                          json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (tuple, np.ndarray)):
        return list(v)
    raise TypeError(f"not serializable: {type(v)}")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CommandError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, mcmc=dataclasses.replace(cfg.mcmc, seed=args.seed))
    problems = validate(cfg.hyperparameters, cfg.mcmc, cfg.evolution)
    if problems:
        raise CommandError("invalid configuration: " + "; ".join(problems))
    return cfg


def _load_expression(run: Run, path, cfg: Config, apply_filter: bool = True):
    X = ds.load_expression(run.input(path))
    if apply_filter and cfg.dataset.filter:
        X = ds.filter_genes(X, cfg.dataset.min_range, cfg.dataset.min_median)
    return X


def _read_id_list(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip().split("\t")[0] for ln in fh
                if ln.strip() and not ln.startswith("#")]


def _control_pcs(run: Run, path, X: ds.ExpressionMatrix, num_pcs: int):
    hk = ds.load_expression(run.input(path)).subset_samples(X.sample_ids)
    return ds.housekeeping_pcs(hk, num_pcs)


# --------------------------------------------------------------------------
# fit-anova


def cmd_fit_anova(args) -> int:
    cfg = _config(args)
    run = Run("fit-anova", args, cfg, cfg.mcmc.seed)
    X = _load_expression(run, args.expression, cfg)
    ann = ds.load_annotations(run.input(args.annotations)).reorder(X.sample_ids)
    D = ds.build_design(ann, coding=cfg.dataset.coding)
    if args.housekeeping:
        pcs = _control_pcs(run, args.housekeeping, X, cfg.dataset.num_pcs)
        D = D.with_covariates(pcs)
    if X.shape[0] == 0:
        raise CommandError("no genes left after filtering")
    print(f"fit-anova: {X.shape[0]} genes, {X.shape[1]} samples, {D.shape[1]} design columns "
          f"({len(D.indices(ds.ARTIFACT))} artifact covariates)")
    if args.dry_run:
        print("dry run: inputs and configuration are valid; no sampling performed")
        return 0
    c = cfg.mcmc
    ckpt = run.path("checkpoint.npz")
    state = acc = None
    if args.resume and ckpt.exists():
        state, acc, ctl = sm.load_checkpoint(ckpt)
        if ctl != (c.burn_in, c.samples, c.thin) or state.seed != c.seed:
            raise CommandError("checkpoint does not match the configured chain")
    summary = sm.run_chain(X, D, cfg.hyperparameters, c, state=state, acc=acc,
                           threads=_threads(args), checkpoint_path=ckpt,
                           checkpoint_every=args.checkpoint_every)
    run.write_text("design.tsv", ds.format_design(D))
    run.write_text("summary.tsv", su.format_summary_table(summary))
    run.write_text("columns.tsv", su.format_column_table(summary))
    run.write_text("genes.tsv", su.format_gene_table(summary))
    run.write_text("counts.tsv", _format_counts(summary, (0.90, 0.95, 0.99)))
    run.finish({"genes": X.shape[0], "columns": D.shape[1], "saved_draws": summary.sample_count})
    return 0


def _format_counts(s: su.PosteriorSummary, qs) -> str:
    lines = ["column\tq\tcount\texpected_fdr"]
    for q in qs:
        counts = su.threshold_counts(s, q)
        for j, name in enumerate(s.column_names):
            try:
                fdr = f"{su.expected_fdr(s, j, q):.6f}"
            except ValueError:
                fdr = "NA"
            lines.append(f"{name}\t{q:.2f}\t{int(counts[j])}\t{fdr}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# signature


def cmd_signature(args) -> int:
    cfg = _config(args)
    run = Run("signature", args, cfg, cfg.mcmc.seed)
    X = ds.load_expression(run.input(args.expression))
    if args.summary:
        if not args.design:
            raise CommandError("--design is required with --summary")
        s = su.load_summary_table(run.input(args.summary))
        D = ds.load_design(run.input(args.design))
        if s.gene_ids != X.gene_ids:
            X = X.subset_genes(s.gene_ids)
        controls = D.indices(ds.ARTIFACT)
        Xc = su.corrected_expression(X, s, D, controls, include_intercept=True)
    elif args.allow_raw:
        s = None
        Xc = ds.ExpressionMatrix(X.gene_ids, X.sample_ids,
                                 X.values - X.values.mean(axis=1, keepdims=True))
    else:
        raise CommandError("signatures are built from artifact-corrected expression; pass "
                           "--summary and --design from fit-anova, or --allow-raw to use "
                           "row-centered raw expression")
    if args.genes:
        genes = _read_id_list(run.input(args.genes))
    elif args.from_column is not None:
        if s is None:
            raise CommandError("--from-column needs --summary")
        col = int(args.from_column) if args.from_column.isdigit() else args.from_column
        try:
            genes = su.selected_genes(s, col, args.threshold)
        except (ValueError, IndexError):
            raise CommandError(f"unknown column {args.from_column!r}") from None
    else:
        raise CommandError("give --genes FILE or --from-column COLUMN")
    if not genes:
        raise CommandError("the gene set is empty")
    missing = [g for g in genes if g not in set(Xc.gene_ids)]
    if missing:
        raise CommandError(f"gene set members not in the expression data: {', '.join(missing)}")
    XQ = Xc.subset_genes(genes)
    sig = sg.metagene(XQ, name=args.name, source=Path(args.expression).name)
    run.write_text("signature.tsv", sg.format_signature(sig))
    run.write_text("gene_set_expression.tsv", ds.format_expression(XQ))
    run.write_text("signature_scores.tsv", sg.format_scores(sig.sample_ids, sig.scores))
    if args.project:
        Y = ds.load_expression(run.input(args.project))
        gmap = None
        if args.map:
            gmap = ds.resolve_gene_map(ds.load_gene_map(run.input(args.map)))
        scores = sg.project(sig, Y, gmap)
        run.write_text("projected_scores.tsv", sg.format_scores(Y.sample_ids, scores))
    run.finish({"genes": len(genes), "rank": sig.rank})
    return 0


# --------------------------------------------------------------------------
# evolve


def cmd_evolve(args) -> int:
    cfg = _config(args)
    run = Run("evolve", args, cfg, cfg.mcmc.seed)
    X = _load_expression(run, args.expression, cfg, apply_filter=not args.no_filter)
    seeds = _read_id_list(run.input(args.seeds))
    controls = None
    if args.housekeeping:
        controls = _control_pcs(run, args.housekeeping, X, cfg.dataset.num_pcs)
    print(f"evolve: {len(seeds)} seed genes, pool of {X.shape[0]} genes, "
          f"stage MCMC {cfg.evolution.stage_burn_in}/{cfg.evolution.stage_samples}, caps "
          f"{cfg.evolution.max_genes} genes / {cfg.evolution.max_factors} factors")
    if args.dry_run:
        missing = [g for g in seeds if g not in set(X.gene_ids)]
        if missing:
            raise CommandError(f"seed genes not in the pool: {', '.join(missing)}")
        print("dry run: inputs and configuration are valid; no sampling performed")
        return 0
    res = fa.evolve(seeds, X, controls, cfg.evolution, cfg.hyperparameters, cfg.factor,
                    seed=cfg.mcmc.seed, threads=_threads(args))
    run.write_text("stage_log.jsonl", res.format_log())
    run.write_text("genes.txt", "".join(g + "\n" for g in res.genes))
    run.write_text("loadings.tsv", fa.format_loadings(res.fit))
    run.write_text("scores.tsv", fa.format_factor_scores(res.fit))
    run.write_text("summary.tsv", su.format_summary_table(res.fit.summary))
    run.finish({"stages": len(res.log), "genes": len(res.genes), "factors": res.fit.k})
    return 0


# --------------------------------------------------------------------------
# simulate / oracle-check / geweke


def cmd_simulate(args) -> int:
    cfg = _config(args)
    run = Run("simulate", args, cfg, cfg.mcmc.seed)
    sc = orc.Scenario(design=args.design, effects=args.effects, planted_rate=args.planted_rate,
                      psi=args.psi)
    K = args.K if args.K is not None else (16 if args.design == "mouse" else 3)
    if args.dry_run:
        print(f"simulate: p={args.p} n={args.n} K={K} design={args.design}")
        return 0
    X, truth = orc.simulate(cfg.hyperparameters, (args.p, args.n, K), sc, cfg.mcmc.seed)
    run.write_text("expression.tsv", ds.format_expression(X))
    run.write_text("design.tsv", ds.format_design(truth.design))
    if args.design == "mouse":
        ann = ds.mouse_annotations(args.n)
        run.write_text("annotations.tsv", ds.format_annotations(ann, ds.MOUSE_LAYOUT.names))
    save_npz(run.path("truth.npz"), {"B": truth.B, "Z": truth.Z, "tau": truth.tau,
                                     "psi": truth.psi, "rho": truth.rho})
    run.finish({"p": args.p, "n": args.n, "K": K})
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _config(args)
    run = Run("oracle-check", args, cfg, cfg.mcmc.seed)
    h = cfg.hyperparameters
    if args.write_golden:
        inst = orc.tiny_instance(np.random.default_rng(cfg.mcmc.seed), *GOLDEN_DIMS)
        exact = orc.exact_tiny_posterior(inst.X, inst.design, h, inst.tau, inst.psi, inst.rho)
        header = {"seed": cfg.mcmc.seed, "p": inst.X.shape[0], "n": inst.X.shape[1],
                  "K": inst.design.shape[1]}
        orc.save_golden(args.write_golden, exact, header)
        run.outputs.append(Path(args.write_golden))
        print(f"wrote golden inclusion probabilities to {args.write_golden}")
        run.finish({"golden": str(args.write_golden)})
        return 0
    if args.dry_run:
        print(f"oracle-check: {args.instances} instances x {args.samples} samples")
        return 0
    rep = orc.oracle_check(h, args.instances, args.samples, args.burn_in, cfg.mcmc.seed,
                           args.tolerance, FIXTURES[args.fixture])
    lines = ["instance\tmax_abs_diff"]
    lines += [f"{i + 1}\t{d:.6f}" for i, d in enumerate(rep.max_abs_diff)]
    run.write_text("oracle_report.tsv", "\n".join(lines) + "\n")
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"oracle-check: max |delta pi*| = {rep.worst:.4f} (tolerance {rep.tolerance}) {verdict}")
    run.finish({"max_abs_diff": rep.worst, "passed": rep.passed})
    return 0 if rep.passed else EXIT_FAIL


def cmd_geweke(args) -> int:
    cfg = _config(args)
    run = Run("geweke", args, cfg, cfg.mcmc.seed)
    h = MIXING_HYPERPARAMETERS if args.hyperparameters == "mixing" else cfg.hyperparameters
    if args.dry_run:
        print(f"geweke: {args.sweeps} sweeps on p, n, K = 5, 10, 3")
        return 0
    res = orc.geweke_harness(h, (5, 10, 3), args.sweeps, cfg.mcmc.seed, FIXTURES[args.fixture])
    lines = ["statistic\tprior_mean\tchain_mean\tz"]
    for name, pm, cm, z in zip(res.names, res.prior_mean, res.chain_mean, res.z):
        lines.append(f"{name}\t{pm:.6g}\t{cm:.6g}\t{z:.3f}")
    run.write_text("geweke_report.tsv", "\n".join(lines) + "\n")
    passed = res.max_abs_z < args.limit
    print(f"geweke: max |z| = {res.max_abs_z:.2f} (limit {args.limit}) "
          f"{'PASS' if passed else 'FAIL'}")
    run.finish({"max_abs_z": res.max_abs_z, "passed": passed})
    return 0 if passed else EXIT_FAIL


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int,
                        help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--out", default=".", metavar="DIR", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate inputs only")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsegx", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit-anova", parents=[common], help="sparse ANOVA regression fit")
    f.add_argument("--expression", required=True)
    f.add_argument("--annotations", required=True)
    f.add_argument("--housekeeping", help="housekeeping probe expression for artifact covariates")
    f.add_argument("--checkpoint-every", type=int, default=10_000)
    f.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    f.set_defaults(func=cmd_fit_anova)

    s = sub.add_parser("signature", parents=[common], help="metagene signature and projection")
    s.add_argument("--expression", required=True)
    s.add_argument("--summary", help="summary.tsv from fit-anova")
    s.add_argument("--design", help="design.tsv from fit-anova")
    s.add_argument("--genes", help="file with one gene id per line")
    s.add_argument("--from-column", help="select genes with pi_star above --threshold here")
    s.add_argument("--threshold", type=float, default=0.95)
    s.add_argument("--project", help="expression matrix to project the signature onto")
    s.add_argument("--map", help="gene map from signature genes to --project rows")
    s.add_argument("--name", default="signature")
    s.add_argument("--allow-raw", action="store_true",
                   help="build from row-centered raw expression without correction")
    s.set_defaults(func=cmd_signature)

    e = sub.add_parser("evolve", parents=[common], help="evolutionary factor model search")
    e.add_argument("--expression", required=True)
    e.add_argument("--seeds", required=True, help="file with one seed gene id per line")
    e.add_argument("--housekeeping")
    e.add_argument("--no-filter", action="store_true")
    e.set_defaults(func=cmd_evolve)

    m = sub.add_parser("simulate", parents=[common], help="synthetic data set")
    m.add_argument("--p", type=int, default=500)
    m.add_argument("--n", type=int, default=60)
    m.add_argument("--K", type=int)
    m.add_argument("--design", choices=("mouse", "random"), default="mouse")
    m.add_argument("--effects", choices=("prior", "planted"), default="planted")
    m.add_argument("--planted-rate", type=float, default=0.05)
    m.add_argument("--psi", type=float, help="pin every residual variance")
    m.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle-check", parents=[common], help="MCMC versus exact enumeration")
    o.add_argument("--instances", type=int, default=20)
    o.add_argument("--samples", type=int, default=50_000)
    o.add_argument("--burn-in", type=int, default=1_000)
    o.add_argument("--tolerance", type=float, default=0.02)
    o.add_argument("--fixture", choices=tuple(FIXTURES), default="none",
                   help="run a deliberately corrupted sampler")
    o.add_argument("--write-golden", metavar="PATH",
                   help="regenerate the golden exact-posterior file and exit")
    o.set_defaults(func=cmd_oracle_check)

    g = sub.add_parser("geweke", parents=[common], help="joint-distribution sampler test")
    g.add_argument("--sweeps", type=int, default=200_000)
    g.add_argument("--fixture", choices=tuple(FIXTURES), default="none")
    g.add_argument("--limit", type=float, default=4.0)
    g.add_argument("--hyperparameters", choices=("mixing", "config"), default="mixing",
                   help="'mixing' uses moderate priors under which the test chain mixes")
    g.set_defaults(func=cmd_geweke)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ds.ValidationError, ds.DataFormatError,
            sg.RankError, FileNotFoundError) as exc:
        print(f"sparsegx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
