"""``deer`` command line: run, bench, noise-lab, script-gen."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .backend import OpenAICompletionsBackend, ScriptedBackend, dump_scripts
from .bench import (
    average_reports,
    compute_metrics,
    format_table,
    load_dataset,
    load_records,
    split_rounds,
)
from .config import AppConfig, resolve
from .confidence import CODE_CONFIDENCE_TOKEN_CAP
from .controller import ConfigError, DeerController, RunAborted
from .monitor import MonitorError
from .scriptgen import Scenario, ScenarioError, script_gen, verify_script

logger = logging.getLogger("deer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: config error: {message}\n")


def _add_controller_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("early exit")
    g.add_argument("--lambda", dest="lam", type=float,
                   help="exit when trial-answer confidence exceeds this (default 0.95)")
    g.add_argument("--alpha", type=float, help="MAD penalty for deer-pro (default 1)")
    g.add_argument("--n-prompts", type=int, help="inducer prompts per transition in deer-pro (default 4)")
    g.add_argument("--confidence-token-cap", type=int,
                   help="score only the first K answer tokens (default: unlimited; 50 for code items)")
    g.add_argument("--aggregate", choices=["geomean", "mean"],
                   help="token-probability aggregation (default geomean; mean is an ablation)")
    g.add_argument("--max-tokens", dest="max_total_tokens", type=int,
                   help="main-branch token budget (default 16384)")
    g.add_argument("--include-induced-in-budget", dest="count_induced_in_budget", action="store_const", const=True,
                   help="charge trial-answer tokens against --max-tokens")
    g.add_argument("--top-k", type=int, help="logprob alternatives per token (default 5)")
    g.add_argument("--temperature", type=float, help="sampling temperature (default 0, greedy)")
    g.add_argument("--seed", type=int, help="sampling seed sent to the backend")
    m = p.add_argument_group("transition monitor")
    m.add_argument("--monitor", choices=["marker", "entropy"], help="transition detection (default marker)")
    m.add_argument("--markers", type=lambda s: [x for x in s.split(",") if x],
                   help="comma-separated transition words (default Wait)")
    m.add_argument("--entropy-threshold", type=float,
                   help="first-token entropy in nats that marks a transition (default 0.672)")
    m.add_argument("--step-delimiter", type=lambda s: s.encode().decode("unicode_escape"),
                   help="reasoning-step delimiter for the entropy monitor (default \\n\\n)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deer", description="Dynamic early exit for reasoning models.")
    p.add_argument("--version", action="version", version=f"deer {__version__}")
    p.add_argument("--log-level", default=None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a dataset through the controller")
    r.add_argument("--mode", choices=["vanilla", "deer", "deer-pro", "deer-parallel"])
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True, help="JSON-lines run file")
    r.add_argument("--config", help="JSON config file, or an earlier run file to replay its config")
    r.add_argument("--backend", choices=["http", "scripted"])
    r.add_argument("--endpoint", help="OpenAI-compatible server URL (or DEER_ENDPOINT)")
    r.add_argument("--model", help="model name on the server (or DEER_MODEL)")
    r.add_argument("--script", help="scripted-backend file (with --backend scripted)")
    r.add_argument("--workers", type=int, help="questions in flight at once (default 1)")
    r.add_argument("--rounds", type=int, help="repeat the dataset with seeds seed..seed+rounds-1 (default 1)")
    _add_controller_flags(r)

    b = sub.add_parser("bench", help="grade run records and report Acc/Tok/CR")
    b.add_argument("--dataset", required=True)
    b.add_argument("--records", required=True)
    b.add_argument("--baseline")
    b.add_argument("--out", required=True, help="report path (.json); table and figures are written alongside")
    b.add_argument("--label", default=None)
    b.add_argument("--no-figures", action="store_true")

    n = sub.add_parser("noise-lab", help="Monte Carlo false-exit rates vs closed forms")
    n.add_argument("--grid", help="JSON grid {mu, lambda, sigma, n, alpha: [..]} (default: built-in sweep)")
    n.add_argument("--trials", type=int, default=1_000_000)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--workers", type=int, default=1)
    n.add_argument("--out", required=True, help="CSV report; JSON summary and figures are written alongside")
    n.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("script-gen", help="write a scripted-backend fixture with a known pearl")
    s.add_argument("--spec", required=True, help="JSON scenario, or a list of scenarios")
    s.add_argument("--out", required=True)
    s.add_argument("--dataset-out", help="also write a matching dataset file")
    s.add_argument("--no-verify", action="store_true")
    return p


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def _run_overrides(args) -> dict:
    mode = args.mode.replace("-", "_") if args.mode else None
    o = {
        "backend.kind": args.backend,
        "backend.endpoint": args.endpoint,
        "backend.model": args.model,
        "backend.script": args.script,
        "run.workers": args.workers,
        "run.rounds": args.rounds,
        "controller.mode": mode,
        "log_level": args.log_level,
        "monitor.strategy": args.monitor,
        "monitor.markers": args.markers,
        "monitor.entropy_threshold": args.entropy_threshold,
        "monitor.step_delimiter": args.step_delimiter,
    }
    for name in ("lam", "alpha", "n_prompts", "confidence_token_cap", "aggregate", "max_total_tokens",
                 "count_induced_in_budget", "top_k", "temperature", "seed"):
        o[f"controller.{name}"] = getattr(args, name)
    return o


def make_backend(cfg: AppConfig):
    b = cfg.backend
    if b.kind == "scripted":
        return ScriptedBackend.from_file(b.script, max_concurrency=b.max_concurrency)
    return OpenAICompletionsBackend(b.endpoint, b.model, b.api_key, timeout=b.timeout,
                                    stream=b.stream, max_concurrency=b.max_concurrency)


def _write(fh, obj):
    fh.write(json.dumps(obj, sort_keys=True) + "\n")
    fh.flush()


def cmd_run(args) -> int:
    cfg = resolve(args.config, _run_overrides(args))
    cfg.validate()
    logging.basicConfig(level=cfg.log_level.upper())
    items = load_dataset(args.dataset)
    backend = make_backend(cfg)
    code_cfg = dataclasses.replace(cfg.controller, confidence_token_cap=cfg.controller.confidence_token_cap
                                   or CODE_CONFIDENCE_TOKEN_CAP)
    jobs = []
    for rnd in range(cfg.run.rounds):
        seed = None if cfg.controller.seed is None and cfg.run.rounds == 1 else (cfg.controller.seed or 0) + rnd
        for it in items:
            c = code_cfg if it.task_kind == "code" else cfg.controller
            jobs.append((rnd, it, dataclasses.replace(c, seed=seed)))

    def one(job):
        rnd, it, c = job
        rec = DeerController(backend, c).run(it.question, it.id)
        rec.round = rnd
        return rec

    n_done, error = 0, None
    with open(args.out, "w", encoding="utf-8") as fh:
        _write(fh, {"type": "header", "tool": "deer", "version": __version__, "config": cfg.to_json(),
                    "dataset": str(args.dataset)})
        pool = ThreadPoolExecutor(cfg.run.workers)
        try:
            for rec in pool.map(one, jobs):
                _write(fh, rec.to_json())
                n_done += 1
        except RunAborted as exc:
            error = f"{exc.record.question_id}: {exc}"
        except KeyboardInterrupt:
            error = "interrupted"
        finally:
            pool.shutdown(wait=error is None, cancel_futures=True)
            backend.close()
            _write(fh, {"type": "footer", "complete": error is None, "n_records": n_done, "error": error})
    if error is not None:
        print(f"deer run: incomplete after {n_done} records: {error}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"deer run: wrote {n_done} records to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def _run_header(path) -> Optional[dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        head = json.loads(first)
    except json.JSONDecodeError:
        return None
    return head if head.get("type") == "header" else None


def _label(path, given=None) -> str:
    if given:
        return given
    head = _run_header(path)
    if head:
        return head["config"]["controller"]["mode"].replace("_", "-")
    return Path(path).stem


def cmd_bench(args) -> int:
    from .plotting import plot_bench, plot_confidence_histogram

    items = load_dataset(args.dataset)
    records = load_records(args.records)
    rounds = split_rounds(records)
    base_rounds = split_rounds(load_records(args.baseline)) if args.baseline else None
    reports = []
    for rnd, recs in rounds.items():
        base = None
        if base_rounds is not None:
            base = base_rounds.get(rnd) or next(iter(base_rounds.values()))
        reports.append(compute_metrics(recs, items, base))
    report = average_reports(reports)
    rows = []
    if base_rounds is not None:
        rows.append((_label(args.baseline), average_reports([compute_metrics(r, items) for r in base_rounds.values()])))
    rows.append((_label(args.records, args.label), report))
    table = format_table(rows)
    print(table)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    head = _run_header(args.records)
    payload = {"tool": "deer", "version": __version__, "dataset": str(args.dataset),
               "records": str(args.records), "baseline": args.baseline,
               "config": head["config"] if head else None,
               "methods": [{"label": n, **m.to_json()} for n, m in rows]}
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    if not args.no_figures:
        plot_bench(rows, out.with_name(out.stem + "_acc_tok.png"))
        confs = [a["decision"]["score"] for r in records for a in r.get("induction_attempts", [])]
        if confs:
            lam = head["config"]["controller"]["lam"] if head else 0.95
            plot_confidence_histogram(confs, out.with_name(out.stem + "_confidence.png"), lam)
    return EXIT_OK


# --------------------------------------------------------------------------
# noise-lab
# --------------------------------------------------------------------------


def cmd_noise_lab(args) -> int:
    from .noise_lab import grid_scenarios, ordering_violations, sweep
    from .plotting import plot_noise_sweep

    grid = {}
    if args.grid:
        with open(args.grid, encoding="utf-8") as fh:
            grid = json.load(fh)
    scenarios = grid_scenarios(grid, args.trials, args.seed)
    rows = sweep(scenarios, args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = [f.name for f in dataclasses.fields(rows[0])] if rows else []
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mu", "lambda", "sigma", "n", "alpha", "strategy", "empirical", "se", "analytic"])
        for r in rows:
            w.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in fields])
    bad = ordering_violations(rows)
    summary = {"tool": "deer", "version": __version__, "trials": args.trials, "seed": args.seed,
               "grid": grid, "scenarios": len(scenarios), "ordering_violations": [list(k) for k, _ in bad]}
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if not args.no_figures and rows:
        for alpha in sorted({r.alpha for r in rows}):
            plot_noise_sweep(rows, out.with_name(f"{out.stem}_alpha{alpha:g}.png"), alpha=alpha)
    print(f"deer noise-lab: {len(scenarios)} scenarios, {len(bad)} ordering violations -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# script-gen
# --------------------------------------------------------------------------


def cmd_script_gen(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        spec = json.load(fh)
    specs = spec if isinstance(spec, list) else [spec]
    scenarios = [Scenario.from_json(d) for d in specs]
    scripts = [script_gen(sc) for sc in scenarios]
    if not args.no_verify:
        for sc, s in zip(scenarios, scripts):
            verify_script(s, sc)
    dump_scripts(scripts, args.out)
    if args.dataset_out:
        with open(args.dataset_out, "w", encoding="utf-8") as fh:
            for sc in scenarios:
                fh.write(json.dumps({"id": sc.id, "question": sc.question_text, "answer": sc.answer,
                                     "task": "math"}) + "\n")
    print(f"deer script-gen: wrote {len(scripts)} script(s) to {args.out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "noise-lab": cmd_noise_lab, "script-gen": cmd_script_gen}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MonitorError) as exc:
        print(f"deer {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        code = EXIT_CONFIG if isinstance(exc, ScenarioError) else EXIT_RUNTIME
        print(f"deer {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
