"""Command-line entry point.

Exit status: 0 on success, 1 when an experiment or operation fails, 2 on
usage or configuration errors. Heavy modules are imported per subcommand so
the ``monitor`` process stays small.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

log = logging.getLogger("decoytrap")

PRESETS = ("reference", "ep1", "ep2", "tiny")


class UsageError(Exception):
    pass


def _spec_for(args):
    from . import emulator

    if args.preset == "reference":
        spec = emulator.reference_spec(args.seed)
    elif args.preset == "ep1":
        spec = emulator.ep1_like(seed=args.seed)
    elif args.preset == "ep2":
        spec = emulator.ep2_like(seed=args.seed)
    else:
        spec = emulator.CorpusSpec(3, emulator.CountLaw(40), seed=args.seed)
    if getattr(args, "dirs", None):
        spec.n_directories = args.dirs
    if getattr(args, "files_per_dir", None):
        spec.files_per_directory = emulator.CountLaw(args.files_per_dir)
    return spec


def _profile(name, cfg, args=None):
    from . import config, emulator

    if name.lower() == "custom":
        base = emulator.AttackProfile("custom", "Random", 1, 0.0, ".custom")
    else:
        try:
            base = emulator.get_profile(name)
        except KeyError as exc:
            raise UsageError(str(exc)) from None
    flags = {}
    if args is not None:
        flags = {"threads": getattr(args, "threads_override", None), "order": getattr(args, "order_override", None)}
    return config.apply_profile_overrides(base, cfg, **flags)


def cmd_gen_corpus(args, cfg) -> int:
    from . import emulator

    manifest = emulator.generate_corpus(_spec_for(args), args.root)
    manifest.save(args.manifest)
    print(json.dumps({"root": os.path.abspath(args.root), "manifest": args.manifest, "files": manifest.total_files}))
    return 0


def cmd_select(args, cfg) -> int:
    from . import config, emulator, features, selection

    roots = args.root or cfg.get("roots")
    if not roots:
        raise UsageError("select needs --root or 'roots' in the config file")
    method = args.method or cfg.get("method")
    if not method:
        raise UsageError("select needs --method or 'method' in the config file")
    opts = config.selection_options(cfg, seed=args.seed, workers=args.workers)
    if args.manifest:
        opts.created_lookup = emulator.Manifest.load(args.manifest).created_lookup(roots[0])
    scan = features.ScanConfig(list(roots), args.exclude or cfg.get("exclusions", []), cfg.get("min_files", 3))
    traps = selection.select_traps(scan, method, opts)
    if args.rename:
        traps = selection.rename_traps(traps, args.suffix or cfg.get("suffix", selection.DEFAULT_SUFFIX))
    selection.persist_traps(traps, args.out)
    for w in traps.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps({"method": traps.method, "traps": traps.trap_count, "trap_pct": traps.trap_percentage, "out": args.out}))
    return 0


def cmd_monitor(args, cfg) -> int:
    from .monitor import serve

    return serve(args.traps, args.mode, args.audit_log, args.backend)


def cmd_attack(args, cfg) -> int:
    from . import emulator

    profile = _profile(args.profile, cfg, args)
    attack_log = emulator.run_attack(profile, args.root, seed=args.seed)
    text = attack_log.to_jsonl()
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(json.dumps({"profile": profile.name, "encrypted": len(attack_log.records), "stop_cause": attack_log.stop_cause}))
    return 0


def _open_or_make_corpus(args, cfg, tmp_holder):
    from . import harness

    if args.root:
        if not args.manifest:
            raise UsageError("--root needs --manifest")
        return harness.Corpus.open(args.root, args.manifest)
    tmp = tempfile.mkdtemp(prefix="decoytrap-corpus-")
    tmp_holder.append(tmp)
    return harness.Corpus.generate(args.preset, _spec_for(args), os.path.join(tmp, "root"))


def cmd_run(args, cfg) -> int:
    from . import config, harness

    tmp: list[str] = []
    try:
        corpus = _open_or_make_corpus(args, cfg, tmp)
        opts = config.selection_options(cfg)
        method = args.method or cfg.get("method")
        if not method:
            raise UsageError("run needs --method")
        result = harness.run_experiment(
            corpus,
            method,
            _profile(args.profile, cfg, args),
            args.seed,
            opts,
            suffix=cfg.get("suffix", "_tp"),
            backend=args.backend,
            verify_restore=args.verify_restore,
        )
    finally:
        for t in tmp:
            shutil.rmtree(t, ignore_errors=True)
    print(result.to_json())
    return 0 if result.status == harness.STATUS_OK else 1


def cmd_grid(args, cfg) -> int:
    from . import config, emulator, harness

    profiles = [_profile(p, cfg) for p in args.profiles] if args.profiles else [
        _profile(p.name, cfg) for p in emulator.builtin_profiles()
    ]
    tmp: list[str] = []
    corpora = []
    try:
        for item in args.corpus or []:
            label, _, rest = item.partition("=")
            root, _, manifest = rest.partition(":")
            if not (label and root and manifest):
                raise UsageError(f"--corpus expects LABEL=ROOT:MANIFEST, got {item!r}")
            corpora.append(harness.Corpus.open(root, manifest, label))
        for preset in args.preset or ([] if corpora else ["reference"]):
            ns = argparse.Namespace(preset=preset, seed=0)
            d = tempfile.mkdtemp(prefix="decoytrap-corpus-")
            tmp.append(d)
            corpora.append(harness.Corpus.generate(preset, _spec_for(ns), os.path.join(d, "root")))
        report = harness.run_grid(
            args.methods,
            profiles,
            corpora,
            args.seeds,
            args.results,
            config.selection_options(cfg),
            backend=args.backend,
            progress=lambda r: log.info("%s %s %s seed=%d lost=%d delay=%s", r.corpus, r.method, r.profile, r.seed, r.files_lost, r.detection_delay_s),
        )
    finally:
        for t in tmp:
            shutil.rmtree(t, ignore_errors=True)
    print(report.to_markdown())
    return 0 if all(c.status == harness.STATUS_OK for c in report.cells) else 1


def cmd_report(args, cfg) -> int:
    from . import harness

    cells = harness.load_results(args.results)
    if not cells:
        print(f"no results in {args.results}", file=sys.stderr)
        return 1
    report = harness.ComparisonReport(cells)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    md = report.to_markdown()
    if args.markdown:
        with open(args.markdown, "w", encoding="utf-8") as fh:
            fh.write(md)
    print(md)
    return 0


def cmd_restore(args, cfg) -> int:
    from . import emulator, selection

    if args.traps:
        selection.restore_traps(selection.load_traps(args.traps))
    manifest = emulator.Manifest.load(args.manifest)
    fixed = emulator.restore_corpus(args.root, manifest, verify=args.verify)
    bad = emulator.verify_corpus(args.root, manifest) if args.verify else []
    print(json.dumps({"fixed": fixed, "mismatched": len(bad)}))
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoytrap", description="Decoy-file ransomware early detection.")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic endpoint")
    g.add_argument("--root", required=True)
    g.add_argument("--manifest", required=True)
    g.add_argument("--preset", choices=PRESETS, default="reference")
    g.add_argument("--dirs", type=int)
    g.add_argument("--files-per-dir", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("select", help="choose trap files")
    s.add_argument("--method")
    s.add_argument("--root", action="append")
    s.add_argument("--exclude", action="append")
    s.add_argument("--manifest", help="corpus manifest supplying creation times")
    s.add_argument("--out", required=True)
    s.add_argument("--rename", action="store_true", help="also rename the traps")
    s.add_argument("--suffix")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_select)

    m = sub.add_parser("monitor", help="watch a trap list; prints READY then alert lines")
    m.add_argument("--traps", required=True)
    m.add_argument("--mode", choices=("FirstHit", "Continuous"), default="FirstHit")
    m.add_argument("--audit-log")
    m.add_argument("--backend", choices=("auto", "inotify", "watchdog"), default="auto")
    m.set_defaults(func=cmd_monitor)

    a = sub.add_parser("attack", help="run an emulated attack on a sandbox corpus")
    a.add_argument("--profile", required=True)
    a.add_argument("--root", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--threads-override", type=int)
    a.add_argument("--order-override", choices=("Alphabetical", "ReverseAlphabetical", "DepthFirst", "BreadthFirst", "Random"))
    a.add_argument("--log", help="write the attack log (JSON lines) here")
    a.set_defaults(func=cmd_attack)

    for name, fn, text in (("run", cmd_run, "one experiment"), ("grid", cmd_grid, "methods x profiles x corpora x seeds")):
        r = sub.add_parser(name, help=text)
        if name == "run":
            r.add_argument("--method")
            r.add_argument("--profile", required=True)
            r.add_argument("--seed", type=int, default=0)
            r.add_argument("--root")
            r.add_argument("--manifest")
            r.add_argument("--preset", choices=PRESETS, default="reference")
            r.add_argument("--threads-override", type=int)
            r.add_argument("--order-override", choices=("Alphabetical", "ReverseAlphabetical", "DepthFirst", "BreadthFirst", "Random"))
            r.add_argument("--verify-restore", action="store_true")
        else:
            r.add_argument("--methods", nargs="+", default=["AP", "APFO", "GMM", "MeanShift", "OPTICS"])
            r.add_argument("--profiles", nargs="+")
            r.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
            r.add_argument("--corpus", action="append", help="LABEL=ROOT:MANIFEST")
            r.add_argument("--preset", action="append", choices=PRESETS)
            r.add_argument("--results", required=True, help="JSON-lines results file (resumable)")
        r.add_argument("--backend", choices=("auto", "inotify", "watchdog"), default="auto")
        r.set_defaults(func=fn)

    rp = sub.add_parser("report", help="summarise a results file")
    rp.add_argument("--results", required=True)
    rp.add_argument("--csv")
    rp.add_argument("--markdown")
    rp.set_defaults(func=cmd_report)

    rs = sub.add_parser("restore", help="bring a corpus back to its manifest state")
    rs.add_argument("--root", required=True)
    rs.add_argument("--manifest", required=True)
    rs.add_argument("--traps", help="trap list to rename back first")
    rs.add_argument("--verify", action="store_true")
    rs.set_defaults(func=cmd_restore)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        from .config import ConfigError, load_config

        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"decoytrap: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"decoytrap: {exc}", file=sys.stderr)
        return 1
