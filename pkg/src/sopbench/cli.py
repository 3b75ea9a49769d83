"""``sopbench`` command line.

Every command ends by printing one JSON summary line. It goes to stdout,
or to stderr when stdout carries the data stream (``--output -`` or no
output path). Exit codes: 2 config, 3 data, 4 endpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from typing import Optional

from . import __version__
from .config import ConfigError, RunConfig
from .evaluate import MatchConfig, render_table, run_evaluation, token_stats
from .grounding import GroundingConfig, canonicalize_episode
from .ingest import Corpus, IngestError, dump_corpus, parse_corpus, split_corpus
from .model import action_to_dict
from .policy import (
    EndpointUnavailable,
    RandomPolicy,
    RemoteEndpoint,
    RemotePolicy,
    RuleSopPolicy,
    oracle_policy,
    replay_episode,
)
from .prompts import BuildStats, MissingPipeline, ParseFailure, Variant, build_dataset
from .sop import EXCLUDED, EmptyPipeline, RuleSet, SopError, build_pipeline, classify_action
from .stub import GoldenTable, StubServer
from .synthetic import TEMPLATES, generate_mixed, generate_synthetic

log = logging.getLogger("sopbench")

EXIT_CONFIG, EXIT_DATA, EXIT_ENDPOINT = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- plumbing --------------------------------------------------------------


def _to_stdout(path: Optional[str]) -> bool:
    return path in (None, "-")


@contextmanager
def _open_out(path: Optional[str]):
    if _to_stdout(path):
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            yield f


def _read_corpus(cfg: RunConfig) -> Corpus:
    path = cfg["paths.input"]
    if _to_stdout(path):
        return parse_corpus(sys.stdin, lenient=cfg["lenient"], jobs=cfg["jobs"])
    with open(path, encoding="utf-8") as f:
        return parse_corpus(f, lenient=cfg["lenient"], jobs=cfg["jobs"])


def _summary(cfg: RunConfig, doc: dict, data_on_stdout: Optional[bool] = None) -> None:
    if data_on_stdout is None:
        data_on_stdout = _to_stdout(cfg["paths.output"])
    stream = sys.stderr if data_on_stdout else sys.stdout
    print(json.dumps(doc, sort_keys=True), file=stream, flush=True)


def _grounding(cfg: RunConfig) -> GroundingConfig:
    return GroundingConfig(cfg["grounding.expand_fraction"], cfg["grounding.click_threshold"],
                           cfg["grounding.max_fallback_distance"])


def _rules(cfg: RunConfig) -> RuleSet:
    return RuleSet.load(cfg["paths.rules"])


def _variant(cfg: RunConfig) -> Variant:
    try:
        return Variant(cfg["variant"])
    except ValueError:
        raise ConfigError(f"unknown variant {cfg['variant']!r}") from None


def _policy(cfg: RunConfig, rules: RuleSet):
    name = cfg["policy"]
    if name == "oracle":
        return oracle_policy
    if name == "rule_sop":
        return RuleSopPolicy(rules)
    if name == "random":
        return RandomPolicy(cfg["seed"])
    if name == "remote":
        if not cfg["remote.url"]:
            raise ConfigError("remote policy needs --endpoint or remote.url")
        ep = RemoteEndpoint(cfg["remote.url"], cfg["remote.timeout_ms"], cfg["remote.max_retries"],
                            cfg["remote.max_concurrency"])
        return RemotePolicy(ep, _variant(cfg), cfg["max_history"])
    raise ConfigError(f"unknown policy {name!r}")


# --- commands --------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    corpus = _read_corpus(cfg)
    with _open_out(cfg["paths.output"]) as out:
        n = dump_corpus(corpus, out)
    manifest = corpus.manifest_document()
    if args.manifest:
        with open(args.manifest, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _summary(cfg, {"command": "ingest", "episodes": n, "rejected": len(corpus.rejected), "manifest": manifest})
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    prefix = cfg["paths.output"]
    if _to_stdout(prefix):
        raise ConfigError("split needs --output as a file prefix")
    corpus = _read_corpus(cfg)
    parts = split_corpus(corpus, cfg["split.fractions"], cfg["split.seed"])
    sizes = {}
    for name, part in zip(("train", "val", "test"), parts):
        with open(f"{prefix}.{name}.jsonl", "w", encoding="utf-8", newline="\n") as f:
            sizes[name] = dump_corpus(part, f)
    _summary(cfg, {"command": "split", "sizes": sizes, "seed": cfg["split.seed"]})
    return 0


def annotate_record(e, rules: RuleSet, gcfg: GroundingConfig) -> dict:
    outcomes = canonicalize_episode(e, gcfg)
    canon = [o.action for o in outcomes]
    steps = []
    for t, o in enumerate(outcomes):
        desc = classify_action(o.action, rules) if o.grounded else EXCLUDED
        steps.append({
            "index": t,
            "action": action_to_dict(o.action),
            "grounded": o.grounded,
            "description": None if desc is EXCLUDED else desc,
        })
    try:
        sop = build_pipeline(e, canon, rules).to_record()
    except EmptyPipeline:
        sop = None
    return {"episode_id": e.episode_id, "subset": e.subset, "instruction": e.instruction, "steps": steps, "sop": sop}


def cmd_annotate(cfg: RunConfig, args) -> int:
    corpus = _read_corpus(cfg)
    rules, gcfg = _rules(cfg), _grounding(cfg)
    n = empty = 0
    with _open_out(cfg["paths.output"]) as out:
        for e in corpus:
            rec = annotate_record(e, rules, gcfg)
            empty += rec["sop"] is None
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    _summary(cfg, {"command": "annotate", "episodes": n, "empty_pipelines": empty, "rules": rules.name})
    return 0


def cmd_build_prompts(cfg: RunConfig, args) -> int:
    corpus = _read_corpus(cfg)
    v = _variant(cfg)
    stats = BuildStats()
    samples = []
    with _open_out(cfg["paths.output"]) as out:
        for s in build_dataset(corpus, _rules(cfg), _grounding(cfg), v, cfg["mix"], cfg["max_history"], stats,
                               cfg["jobs"]):
            samples.append(s)
            out.write(s.to_json() + "\n")
    _summary(cfg, {
        "command": "build-prompts",
        "variant": v.value,
        "mix": cfg["mix"],
        "episodes": stats.episodes,
        "samples": stats.samples,
        "skipped_ungrounded": stats.skipped_ungrounded,
        "skipped_episodes": stats.skipped_episodes,
        "tokens": token_stats(samples),
    })
    return 0


def cmd_gen_synthetic(cfg: RunConfig, args) -> int:
    name, n, seed = cfg["synthetic.template"], cfg["synthetic.n"], cfg["seed"]
    rules = _rules(cfg)
    if name == "mixed":
        corpus = generate_mixed(n, seed, rules=rules)
    elif name in TEMPLATES:
        corpus = generate_synthetic(TEMPLATES[name], n, seed, rules)
    else:
        raise ConfigError(f"unknown template {name!r}; choose mixed or one of {sorted(TEMPLATES)}")
    with _open_out(cfg["paths.output"]) as out:
        dump_corpus(corpus, out)
    _summary(cfg, {"command": "gen-synthetic", "template": name, "episodes": len(corpus), "seed": seed,
                   "manifest": corpus.manifest_document()})
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    corpus = _read_corpus(cfg)
    rules = _rules(cfg)
    policy = _policy(cfg, rules)
    mcfg = MatchConfig(cfg["match.click_mode"], cfg["match.text_norm"], cfg["grounding.expand_fraction"])
    report = run_evaluation(corpus, policy, rules, _grounding(cfg), mcfg, cfg["jobs"],
                            model=cfg["model"] or cfg["policy"])
    doc = report.to_dict()
    with _open_out(cfg["paths.output"]) as out:
        out.write(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
    summary = {"command": "evaluate", "policy": cfg["policy"], "overall": doc["overall"], "subsets": doc["subsets"],
               "episodes": doc["counts"]["episodes"], "unevaluated_episodes": len(report.unevaluated_episodes)}
    if report.unevaluated_episodes:
        summary["error"] = "endpoint unavailable"
        _summary(cfg, summary)
        return EXIT_ENDPOINT
    _summary(cfg, summary)
    return 0


def _predicted_record(p) -> Optional[dict]:
    if p is None:
        return None
    if isinstance(p, ParseFailure):
        return {"parse_failure": p.reason, "text": p.text}
    return action_to_dict(p)


def cmd_replay(cfg: RunConfig, args) -> int:
    corpus = _read_corpus(cfg)
    rules = _rules(cfg)
    policy = _policy(cfg, rules)
    mode = cfg["replay.mode"]
    if mode not in ("teacher_forced", "free_running"):
        raise ConfigError(f"unknown replay mode {mode!r}")
    if mode == "free_running" and cfg["policy"] == "oracle":
        raise ConfigError("the oracle policy only works teacher-forced")
    n = failures = 0
    with _open_out(cfg["paths.output"]) as out:
        for e in corpus:
            r = replay_episode(e, policy, mode, rules, _grounding(cfg))
            failures += r.endpoint_failure
            out.write(json.dumps({
                "episode_id": e.episode_id,
                "mode": mode,
                "endpoint_failure": r.endpoint_failure,
                "steps": [{"index": s.index,
                           "gold": action_to_dict(s.gold) if s.gold is not None else None,
                           "predicted": _predicted_record(s.predicted),
                           "grounded": s.grounded,
                           "error": s.error} for s in r.steps],
            }, ensure_ascii=False) + "\n")
            n += 1
    summary = {"command": "replay", "mode": mode, "policy": cfg["policy"], "episodes": n,
               "endpoint_failures": failures}
    if failures:
        summary["error"] = "endpoint unavailable"
    _summary(cfg, summary)
    return EXIT_ENDPOINT if failures else 0


def cmd_report(cfg: RunConfig, args) -> int:
    paths = args.reports or []
    if not paths:
        raise ConfigError("report needs at least one evaluator JSON file")
    rows = []
    for path in paths:
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read report {path!r}: {exc}") from None
        if not isinstance(doc, dict) or "overall" not in doc or "subsets" not in doc:
            raise IngestError(f"{path}: not an evaluator report")
        rows.append((doc.get("model", ""), doc))
    table = render_table(rows)
    with _open_out(cfg["paths.output"]) as out:
        out.write(table + "\n")
    _summary(cfg, {"command": "report", "reports": len(rows)})
    return 0


def cmd_serve_stub(cfg: RunConfig, args) -> int:
    golden = cfg["paths.golden"]
    if not golden and not cfg["stub.malformed"]:
        raise ConfigError("serve-stub needs --golden unless --malformed is set")
    table = GoldenTable.load(golden) if golden else GoldenTable()
    server = StubServer(table, cfg["stub.host"], cfg["stub.port"], cfg["stub.malformed"])
    _summary(cfg, {"command": "serve-stub", "url": server.url, "responses": len(table),
                   "malformed": cfg["stub.malformed"]}, data_on_stdout=False)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "annotate": cmd_annotate,
    "build-prompts": cmd_build_prompts,
    "gen-synthetic": cmd_gen_synthetic,
    "evaluate": cmd_evaluate,
    "replay": cmd_replay,
    "report": cmd_report,
    "serve-stub": cmd_serve_stub,
}


# --- argument parsing ------------------------------------------------------

# flag dest -> config key
FLAG_KEYS = {
    "input": "paths.input",
    "output": "paths.output",
    "rules": "paths.rules",
    "golden": "paths.golden",
    "variant": "variant",
    "mix": "mix",
    "max_history": "max_history",
    "policy": "policy",
    "endpoint": "remote.url",
    "mode": "replay.mode",
    "click_mode": "match.click_mode",
    "fractions": "split.fractions",
    "template": "synthetic.template",
    "n": "synthetic.n",
    "host": "stub.host",
    "port": "stub.port",
    "malformed": "stub.malformed",
    "model": "model",
    "seed": "seed",
    "jobs": "jobs",
    "lenient": "lenient",
}


def _fractions(s: str) -> list:
    try:
        return [float(x) for x in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config (default: $SOPBENCH_CONFIG)")
    common.add_argument("--input", help="input JSONL, '-' for stdin")
    common.add_argument("--output", help="output path, '-' for stdout")
    common.add_argument("--rules", help="aitw, aia_medical, or a rule-table path")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--lenient", action="store_const", const=True, help="skip bad records instead of failing")
    common.add_argument("--expand-fraction", type=float, dest="expand_fraction")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sopbench", description="SOP-annotated mobile agent data and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize a raw corpus")
    p.add_argument("--manifest", help="write the corpus manifest here")

    p = sub.add_parser("split", parents=[common], help="episode-wise train/val/test split")
    p.add_argument("--fractions", type=_fractions)

    sub.add_parser("annotate", parents=[common], help="canonical actions and SOP pipelines")

    p = sub.add_parser("build-prompts", parents=[common], help="prompt/response samples")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--mix", action="store_const", const=True, help="pair every SOP sample with its base twin")
    p.add_argument("--max-history", type=int, dest="max_history")

    p = sub.add_parser("gen-synthetic", parents=[common], help="template-driven synthetic corpus")
    p.add_argument("--template", help=f"mixed or one of {', '.join(TEMPLATES)}")
    p.add_argument("-n", type=int)

    for name in ("evaluate", "replay"):
        p = sub.add_parser(name, parents=[common], help=f"{name} a policy over a corpus")
        p.add_argument("--policy", choices=["oracle", "rule_sop", "remote", "random"])
        p.add_argument("--endpoint", help="remote inference URL")
        p.add_argument("--variant", choices=[v.value for v in Variant])
        p.add_argument("--max-history", type=int, dest="max_history")
        p.add_argument("--model", help="model name written into the report")
        if name == "evaluate":
            p.add_argument("--click-mode", choices=["exact_element", "enlarged_containment"], dest="click_mode")
        else:
            p.add_argument("--mode", choices=["teacher_forced", "free_running"])

    p = sub.add_parser("report", parents=[common], help="table from evaluator reports")
    p.add_argument("reports", nargs="*", help="evaluator JSON files")

    p = sub.add_parser("serve-stub", parents=[common], help="serve golden responses over HTTP")
    p.add_argument("--golden", help="JSONL of prompt samples to answer with")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--malformed", action="store_const", const=True, help="answer every request with garbage")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if hasattr(args, dest)}
    if getattr(args, "expand_fraction", None) is not None:
        overrides["grounding.expand_fraction"] = args.expand_fraction
    if args.command == "report":
        # report inputs are evaluator files, not a corpus
        overrides.pop("paths.input", None)
        if args.input:
            args.reports = [args.input] + list(args.reports)
    return RunConfig.load(args.config, overrides)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except EndpointUnavailable as exc:
        code, msg = EXIT_ENDPOINT, str(exc)
    except (IngestError, SopError, MissingPipeline, ValueError, KeyError, OSError) as exc:
        code, msg = EXIT_DATA, f"{type(exc).__name__}: {exc}"
    category = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_ENDPOINT: "endpoint"}[code]
    print(json.dumps({"command": args.command, "error": category, "message": msg}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
