"""Batch command line front end.

Every subcommand works inside one run directory::

    OUT/config.json            effective configuration
    OUT/corpus/                corpus files + manifest
    OUT/checkpoints/*.ckpt     parent, pruned, per-pair and adapted models
    OUT/evals/*.json           evaluation results
    OUT/reports/*.tsv          tables and plot data
    OUT/run_log.jsonl          one record per command
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

from .checkpoint import CheckpointError
from .corpus import CorpusSpec, ParallelCorpus, build_corpus
from .evaluate import (
    PAPER_REFERENCE_DELTAS,
    evaluate_pair,
    interference_report,
    random_decode_floor,
    stability_check,
    zero_shot_eval,
)
from .model import PRESETS, ModelConfig
from .packing import FREE, CapacityError, free_zero_violations
from .pipeline import (
    EPOCH_PRESETS,
    EpochPlan,
    RunState,
    TrainSettings,
    adapt_sequence,
    base_prune_retrain,
    descending_order,
    full_finetune_baseline,
    new_state,
    second_ratios_for,
    train_multilingual,
)

log = logging.getLogger("pfadapt")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CAPACITY, EXIT_CHECKPOINT, EXIT_MISSING = 0, 1, 2, 3, 4, 5
SUBCOMMANDS = ("gen-data", "train-mnmt", "prune-base", "adapt", "finetune-baseline", "eval", "zero-shot", "verify", "report", "run-all")


class ConfigError(ValueError):
    pass


class MissingArtifacts(RuntimeError):
    def __init__(self, missing):
        super().__init__("missing artifacts: " + ", ".join(map(str, missing)))
        self.missing = list(missing)


# -- configuration -------------------------------------------------------------


def default_config(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (expected one of {sorted(PRESETS)})")
    model = PRESETS[preset].to_dict()
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "preset": preset,
        "model": model,
        "corpus": CorpusSpec().to_dict(),
        "train": asdict(TrainSettings()),
        "plan": {
            "first_ratio": 0.5,
            "second_ratio": 0.75,
            "equal_share": False,
            "prune_last": True,
            "order": "desc",
            "pairs": None,
            "epochs": asdict(EPOCH_PRESETS[preset]),
            "finetune_epochs": EPOCH_PRESETS[preset].pair_adapt,
            "finetune_pairs": None,
        },
        "eval": {"split": "test"},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None, preset: str | None = None) -> dict:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    chosen = preset or raw.get("preset", "desk")
    cfg = _merge(default_config(chosen), {k: v for k, v in raw.items() if k != "preset"})
    cfg["preset"] = chosen
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    plan = cfg["plan"]
    for key in ("first_ratio", "second_ratio"):
        r = plan[key]
        if not isinstance(r, (int, float)) or not 0.0 <= r < 1.0:
            raise ConfigError(f"plan.{key}: ratio must be in [0, 1), got {r!r}")
    try:
        spec = CorpusSpec.from_dict(cfg["corpus"])
        ModelConfig(**cfg["model"])
        TrainSettings(**cfg["train"])
        EpochPlan(**plan["epochs"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid field: {e}") from None
    for k, v in plan["epochs"].items():
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"plan.epochs.{k}: must be a non-negative integer")
    order = plan["order"]
    if isinstance(order, str):
        if order not in ("desc", "asc"):
            raise ConfigError(f"plan.order: expected 'desc', 'asc' or a list of pairs, got {order!r}")
    else:
        _check_pairs(order, spec, "plan.order")
    for key in ("pairs", "finetune_pairs"):
        if plan[key] is not None:
            _check_pairs(plan[key], spec, f"plan.{key}")
    if cfg["eval"]["split"] not in ("dev", "test"):
        raise ConfigError("eval.split: must be 'dev' or 'test'")


def _check_pairs(pairs, spec: CorpusSpec, where: str) -> None:
    if not isinstance(pairs, list) or not all(isinstance(p, str) for p in pairs):
        raise ConfigError(f"{where}: expected a list of pair codes")
    unknown = [p for p in pairs if p not in spec.languages]
    if unknown:
        raise ConfigError(f"{where}: undeclared pairs {unknown}")
    if len(set(pairs)) != len(pairs):
        raise ConfigError(f"{where}: duplicate pairs")


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.order is not None:
        cfg["plan"]["order"] = args.order if args.order in ("desc", "asc") else _split_list(args.order)
    if args.pairs is not None:
        cfg["plan"]["pairs"] = _split_list(args.pairs)
    if args.equal_share:
        cfg["plan"]["equal_share"] = True
    if args.no_prune_last:
        cfg["plan"]["prune_last"] = False
    validate_config(cfg)
    return cfg


def _split_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def adaptation_order(cfg: dict) -> list[str]:
    spec = CorpusSpec.from_dict(cfg["corpus"])
    order = cfg["plan"]["order"]
    if order == "desc":
        full = descending_order(spec)
    elif order == "asc":
        full = descending_order(spec)[::-1]
    else:
        full = list(order)
    subset = cfg["plan"]["pairs"]
    if subset is not None:
        full = [p for p in full if p in subset] + [p for p in subset if p not in full]
    return full


# -- run directory -------------------------------------------------------------


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def eval_file(self, name: str) -> Path:
        return self.root / "evals" / f"{name}.json"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def require(self, *paths: Path) -> None:
        missing = [p for p in paths if not p.exists()]
        if missing:
            raise MissingArtifacts(missing)

    def load(self, name: str) -> RunState:
        self.require(self.ckpt(name))
        return RunState.load(self.ckpt(name))

    def write_json(self, path: Path, obj) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def read_json(self, path: Path):
        self.require(path)
        return json.loads(path.read_text())


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    lines = ["\t".join(header)] + ["\t".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# -- subcommands ---------------------------------------------------------------


def _corpus(cfg: dict) -> ParallelCorpus:
    return build_corpus(CorpusSpec.from_dict(cfg["corpus"]))


def cmd_gen_data(cfg, run: RunDir) -> dict:
    corpus = _corpus(cfg)
    corpus.write(run.root / "corpus")
    return {"sizes": {p: corpus.size(p) for p in corpus.pairs}}


def cmd_train_mnmt(cfg, run: RunDir) -> dict:
    corpus = _corpus(cfg)
    state = new_state(
        ModelConfig(**cfg["model"]), corpus.spec, TrainSettings(**cfg["train"]), cfg["seed"]
    )
    train_multilingual(state, corpus, cfg["plan"]["epochs"]["multilingual"])
    state.save(run.ckpt("parent"))
    return {"phase_log": state.phase_log}


def cmd_prune_base(cfg, run: RunDir) -> dict:
    state = run.load("parent")
    base_prune_retrain(state, _corpus(cfg), cfg["plan"]["first_ratio"], cfg["plan"]["epochs"]["base_retrain"])
    state.save(run.ckpt("pruned"))
    return {"phase_log": state.phase_log[-1:]}


def second_ratios(cfg: dict, order: list[str]) -> list[float]:
    plan = cfg["plan"]
    return second_ratios_for(order, plan["second_ratio"], plan["first_ratio"], plan["equal_share"], plan["prune_last"])


def cmd_adapt(cfg, run: RunDir) -> dict:
    state = run.load("pruned")
    order = adaptation_order(cfg)
    ratios = second_ratios(cfg, order)
    corpus = _corpus(cfg)
    ledger = []

    def after_pair(s: RunState, pair: str) -> None:
        idx = len(s.owners)
        s.save(run.ckpt(f"adapted_{idx:02d}_{pair}"))
        ledger.append({"pair": pair, "owner": s.owners[pair], "fractions": s.mask.histogram().fractions})

    adapt_sequence(state, corpus, order, ratios, EpochPlan(**cfg["plan"]["epochs"]), after_pair)
    state.save(run.ckpt("adapted"))
    run.write_json(run.root / "evals" / "capacity.json", capacity_rows(state, cfg))
    return {"order": order, "second_ratios": ratios, "phase_log": state.phase_log[2:], "capacity": ledger}


def cmd_finetune(cfg, run: RunDir) -> dict:
    parent = run.load("parent")
    corpus = _corpus(cfg)
    pairs = cfg["plan"]["finetune_pairs"] or adaptation_order(cfg)[:2]
    for pair in pairs:
        ft = full_finetune_baseline(parent, corpus, pair, cfg["plan"]["finetune_epochs"])
        ft.save(run.ckpt(f"fullft_{pair}"))
    return {"pairs": pairs}


def system_checkpoints(run: RunDir) -> dict[str, Path]:
    systems = {}
    for name in ("parent", "pruned", "adapted"):
        if run.ckpt(name).exists():
            systems[name] = run.ckpt(name)
    for p in sorted((run.root / "checkpoints").glob("fullft_*.ckpt")):
        systems[p.stem] = p
    return systems


def cmd_eval(cfg, run: RunDir) -> dict:
    corpus = _corpus(cfg)
    split = cfg["eval"]["split"]
    systems = system_checkpoints(run)
    if "parent" not in systems:
        raise MissingArtifacts([run.ckpt("parent")])
    for name, path in systems.items():
        state = RunState.load(path)
        pairs = [name[len("fullft_"):]] if name.startswith("fullft_") else corpus.pairs
        res = {p: evaluate_pair(state, corpus, p, split) for p in pairs}
        if name.startswith("fullft_"):
            # forgetting report on the remaining pairs: loss only
            for p in corpus.pairs:
                if p not in res:
                    res[p] = evaluate_pair(state, corpus, p, split, with_bleu=False)
        run.write_json(run.eval_file(name), res)
    return {"systems": sorted(systems), "split": split}


def cmd_zero_shot(cfg, run: RunDir) -> dict:
    corpus = _corpus(cfg)
    out = {}
    for name in ("parent", "pruned", "adapted"):
        if not run.ckpt(name).exists():
            continue
        state = RunState.load(run.ckpt(name))
        grid = {}
        for a, b in corpus.zero_shot_directions():
            score, hyps = zero_shot_eval(state, corpus, a, b)
            grid[f"{a}-{b}"] = {"bleu": score.value, "floor": random_decode_floor(corpus, a, b), "hyp_sha256": _hash_hyps(hyps)}
        out[name] = grid
    if not out:
        raise MissingArtifacts([run.ckpt("parent")])
    run.write_json(run.eval_file("zero_shot"), out)
    return {"systems": sorted(out)}


def _hash_hyps(hyps) -> str:
    return hashlib.sha256(json.dumps(hyps).encode()).hexdigest()


def capacity_rows(state: RunState, cfg: dict) -> list[dict]:
    hist = state.mask.histogram()
    order = sorted(state.owners, key=state.owners.get)
    ratios = second_ratios(cfg, order)
    first = cfg["plan"]["first_ratio"]
    rows = [{"owner": 1, "pair": "shared", "count": hist.counts.get(1, 0), "fraction": hist.counts.get(1, 0) / hist.total, "expected": 1.0 - first}]
    remaining = 1.0 - first
    for pair, r2 in zip(order, ratios):
        expected = remaining * (1.0 - r2)
        remaining *= r2
        owner = state.owners[pair]
        c = hist.counts.get(owner, 0)
        rows.append({"owner": owner, "pair": pair, "count": c, "fraction": c / hist.total, "expected": expected})
    rows.append({"owner": 0, "pair": "free", "count": hist.counts.get(FREE, 0), "fraction": hist.counts.get(FREE, 0) / hist.total, "expected": remaining})
    return rows


def ledger_check(state: RunState, cfg: dict) -> tuple[bool, list[str]]:
    """Per tensor, every pair's owned count is within one element of the
    planned fraction."""
    problems = []
    order = sorted(state.owners, key=state.owners.get)
    ratios = second_ratios(cfg, order)
    first = cfg["plan"]["first_ratio"]
    remaining = 1.0 - first
    for pair, r2 in zip(order, ratios):
        expected = remaining * (1.0 - r2)
        remaining *= r2
        for name, count in state.mask.per_tensor_counts(state.owners[pair]).items():
            n = state.mask[name].numel()
            if abs(count - expected * n) > 1.0 + 1e-9:
                problems.append(f"{pair}/{name}: {count} vs {expected * n:.2f}")
    return not problems, problems


def cmd_verify(cfg, run: RunDir) -> dict:
    corpus = _corpus(cfg)
    final = run.load("adapted")
    results = {"stability": [], "ledger": None, "free_zero": None}
    ok = True
    prefixes = [run.ckpt("pruned")] + sorted((run.root / "checkpoints").glob("adapted_[0-9]*_*.ckpt"))
    for path in prefixes:
        if not path.exists():
            continue
        res = stability_check(RunState.load(path), final, corpus)
        results["stability"].append({"checkpoint": path.name, "passed": res.passed, "max_deviation": res.max_deviation})
        ok &= res.passed
    ledger_ok, problems = ledger_check(final, cfg)
    results["ledger"] = {"passed": ledger_ok, "problems": problems[:20]}
    violations = free_zero_violations(final.tensors(), final.mask)
    results["free_zero"] = {"passed": violations == 0, "violations": violations}
    ok &= ledger_ok and violations == 0
    results["passed"] = ok
    run.write_json(run.eval_file("verify"), results)
    return results


def cmd_report(cfg, run: RunDir) -> dict:
    parent_eval = run.eval_file("parent")
    run.require(parent_eval)
    evals = {"parent": run.read_json(parent_eval)}
    for name in ("pruned", "adapted"):
        if run.eval_file(name).exists():
            evals[name] = run.read_json(run.eval_file(name))
    for p in sorted((run.root / "evals").glob("fullft_*.json")):
        evals[p.stem] = {k: v for k, v in run.read_json(p).items() if "bleu" in v}

    pairs = list(evals["parent"])
    adapted = run.ckpt("adapted")
    if adapted.exists() and "adapted" in evals:
        state = RunState.load(adapted)
        order = sorted(state.owners, key=state.owners.get)
        hist = state.mask.histogram()
        fractions = {p: hist.counts.get(o, 0) / hist.total for p, o in state.owners.items()}
    else:
        order, fractions = [], {}

    # interference table: one row per pair/direction/system
    rows = []
    for pair in order + [p for p in pairs if p not in order]:
        for system, per_pair in evals.items():
            if pair not in per_pair or "bleu" not in per_pair[pair]:
                continue
            for direction, value in sorted(per_pair[pair]["bleu"].items()):
                base = evals["parent"][pair]["bleu"][direction]
                rows.append([pair, direction, system, value, value - base, fractions.get(pair, 0.0) if system == "adapted" else None])
    _write_tsv(run.report("interference.tsv"), ["pair", "direction", "system", "bleu", "delta_vs_parent", "param_fraction"], rows)

    # delta plot data: x = order index with parameter percentage
    plot = []
    for name in ("pruned",):
        if name in evals:
            plot.append([0, name, "", None, float(sum(evals[name][p]["bleu_mean"] - evals["parent"][p]["bleu_mean"] for p in pairs) / len(pairs))])
    plot.insert(0, [0, "parent", "", None, 0.0])
    if order:
        for row in interference_report({k: evals[k] for k in ("parent", "adapted")}, order, fractions):
            plot.append([row["order"], "adapted", row["pair"], 100.0 * row["param_fraction"], row["adapted:delta"]])
    _write_tsv(run.report("delta_plot.tsv"), ["order_index", "system", "pair", "param_percent", "delta_bleu"], plot)

    cap_path = run.root / "evals" / "capacity.json"
    if cap_path.exists():
        cap = run.read_json(cap_path)
        _write_tsv(
            run.report("capacity.tsv"),
            ["owner", "pair", "count", "fraction", "expected_fraction"],
            [[r["owner"], r["pair"], r["count"], r["fraction"], r["expected"]] for r in cap],
        )
    zs_path = run.eval_file("zero_shot")
    if zs_path.exists():
        zs = run.read_json(zs_path)
        systems = sorted(zs)
        directions = sorted(zs[systems[0]])
        _write_tsv(
            run.report("zero_shot.tsv"),
            ["direction", *[f"{s}_bleu" for s in systems], "random_floor"],
            [[d, *[zs[s][d]["bleu"] for s in systems], zs[systems[0]][d]["floor"]] for d in directions],
        )
    _write_tsv(
        run.report("paper_reference.tsv"),
        ["direction", "reported_avg_delta_bleu_points"],
        [[k, v] for k, v in PAPER_REFERENCE_DELTAS.items()],
    )
    return {"reports": sorted(p.name for p in (run.root / "reports").iterdir())}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-mnmt": cmd_train_mnmt,
    "prune-base": cmd_prune_base,
    "adapt": cmd_adapt,
    "finetune-baseline": cmd_finetune,
    "eval": cmd_eval,
    "zero-shot": cmd_zero_shot,
    "verify": cmd_verify,
    "report": cmd_report,
}
RUN_ALL = ("gen-data", "train-mnmt", "prune-base", "adapt", "finetune-baseline", "eval", "zero-shot", "verify", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfadapt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--order", help="desc, asc or a comma-separated pair list")
    p.add_argument("--pairs", help="comma-separated subset of pairs to adapt")
    p.add_argument("--equal-share", action="store_true", help="give every adapted pair the same share")
    p.add_argument("--no-prune-last", action="store_true", help="last pair keeps its whole allocation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _effective_config(args, run: RunDir) -> dict:
    saved = run.root / "config.json"
    if args.config is None and saved.exists() and args.command != "gen-data":
        cfg = load_config(str(saved), args.preset)
    else:
        cfg = load_config(args.config, args.preset)
    return apply_flags(cfg, args)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    run = RunDir(args.out)
    try:
        cfg = _effective_config(args, run)
        if args.command in ("adapt", "run-all"):
            order = adaptation_order(cfg)
            if not order:
                raise ConfigError("plan.pairs: nothing to adapt")
        run.root.mkdir(parents=True, exist_ok=True)
        run.write_json(run.root / "config.json", cfg)
        commands = RUN_ALL if args.command == "run-all" else (args.command,)
        for name in commands:
            start = time.perf_counter()
            result = COMMANDS[name](cfg, run)
            record = {
                "command": name,
                "config_hash": config_hash(cfg),
                "seed": cfg["seed"],
                "effective_config": cfg,
                "result": result,
                "wall_time_s": round(time.perf_counter() - start, 3),
            }
            with open(run.root / "run_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if name == "verify" and not result["passed"]:
                print("verify: FAILED", file=sys.stderr)
                return EXIT_FAIL
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MissingArtifacts as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
