"""``tinyforge`` command line: demos -> store -> BC -> PPO -> rollouts -> bench.

Exit codes: 0 success, 1 usage error, 2 runtime error. ``TF_LOG_LEVEL``
(error, warn, info, debug) sets the log level; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench import (
    AgentSpec,
    ExpertSpec,
    PolicySpec,
    RandomSpec,
    ScriptedExpert,
    compare,
    evaluate,
    get_task,
    load_suite,
    make_checker,
    make_env,
    make_step_checker,
)
from .exchange import EpisodeExchange, ingest_dir
from .finetune import PPOConfig, train_ppo
from .pipeline import PipelineConfig, run_episode, run_pipeline
from .policy import load_policy, save_policy
from .pretrain import TrainConfig, train_bc, write_loss_curve
from .trajstore import TrajStore, as_episode_id

logger = logging.getLogger("tinyforge")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(cls, path, overrides):
    """Dataclass config from a JSON file, then ``--set key=value`` overrides."""
    obj = json.loads(Path(path).read_text()) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        obj[k] = _parse_value(v)
    return cls.from_json(obj)


def _suite(path):
    return load_suite(path or "builtin")


def _agent_spec(policy: str, sample: bool) -> AgentSpec:
    if policy == "expert":
        return ExpertSpec()
    if policy == "random":
        return RandomSpec()
    return PolicySpec(load_policy(policy), name=Path(policy).stem, sample=sample)


# -- subcommands -------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    task = get_task(args.task, _suite(args.suite))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    expert, env, check = ScriptedExpert(task), make_env(task), make_checker(task)
    successes = 0
    for seed in range(args.seed, args.seed + args.episodes):
        rec = run_episode(expert, env, seed, task.task_id, success_fn=check)
        successes += rec.success
        ex = EpisodeExchange(rec.episode_id, task.task_id, seed, rec.obs, rec.actions, rec.rewards)
        ex.write(out / ex.filename())
    echo = {"command": "gen-demos", "task": task.to_json(), "episodes": args.episodes, "seed": args.seed,
            "agent": "scripted_expert", "version": __version__}
    (out / "gen_demos.json").write_text(_dump(echo))
    print(f"wrote {args.episodes} episodes to {out} ({successes} successful)")
    return 0


def cmd_ingest(args) -> int:
    with TrajStore(args.store, mode="a") as store:
        mans = ingest_dir(args.input, store, args.clip_len)
    print(f"ingested {len(mans)} episodes into {args.store}")
    return 0


def cmd_inspect(args) -> int:
    with TrajStore(args.store) as store:
        if args.episode:
            print(_dump(store.manifest(as_episode_id(args.episode)).to_json()), end="")
        elif args.label:
            for eid, s, e in store.find_by_label(args.label):
                print(f"{eid.hex()} [{s}, {e})")
        else:
            mans = store.manifests()
            print(f"{len(mans)} episodes, {sum(m.length for m in mans)} frames")
            for m in sorted(mans, key=lambda m: m.episode_id):
                labels = ",".join(sorted({l[0] for l in m.labels}))
                print(f"{m.episode_id.hex()} length={m.length} clip_len={m.clip_len} labels={labels}")
    return 0


def cmd_train_bc(args) -> int:
    cfg = load_config(TrainConfig, args.config, args.set)
    with TrajStore(args.store) as store:
        res = train_bc(store, cfg, checkpoint_dir=args.checkpoint_dir, resume_from=args.resume)
    out = save_policy(res.params, args.out)
    curve = write_loss_curve(args.loss_curve or str(out) + ".loss.txt", res.losses, cfg)
    first, last = res.losses[0][1], res.losses[-1][1]
    print(f"trained {len(res.losses)} steps: loss {first:.4f} -> {last:.4f}; policy {out}; curve {curve}")
    return 0


def cmd_train_ppo(args) -> int:
    cfg = load_config(PPOConfig, args.config, args.set)
    task = get_task(args.task, _suite(args.suite))
    anchor = load_policy(args.anchor, obs_dim=task.obs_dim)
    log_path = args.metrics or str(args.out) + ".metrics.jsonl"
    res = train_ppo(lambda i: make_env(task), anchor, anchor, cfg, make_step_checker(task), log_path=log_path)
    save_policy(res.params, args.out)
    last = res.metrics[-1] if res.metrics else {}
    print(f"ppo {last.get('step', 0)} env steps, last success {last.get('success_rate')}, "
          f"kl {last.get('mean_kl', 0):.4f}; policy {args.out}; metrics {log_path}")
    return 0


def cmd_rollout(args) -> int:
    task = get_task(args.task, _suite(args.suite))
    spec = _agent_spec(args.policy, not args.greedy)
    if not spec.fits(task):
        raise RuntimeError(f"policy does not fit task {task.task_id}")
    filters = [_parse_value(f) for f in args.filter]
    cfg = PipelineConfig(
        task_id=task.task_id, num_generators=args.generators, episodes_per_generator=args.episodes,
        queue_capacity=args.queue_capacity, filters=filters, report_path=args.report, store_path=args.to_store,
        clip_len=args.clip_len, seed_base=args.seed_base, id_salt=args.id_salt,
    )
    echo = {"command": "rollout", "pipeline": cfg.to_json(), "task": task.to_json(), "agent": spec.metadata(),
            "version": __version__}
    res = run_pipeline(lambda: spec.make(task), lambda: make_env(task), cfg, make_checker(task), config_echo=echo)
    s = res.stats
    print(f"produced {s.produced} recorded {s.recorded} filtered {s.filtered_out} failed {s.failed}; "
          f"report {args.report} (run {res.run_id})")
    return 0


def cmd_bench(args) -> int:
    suite = _suite(args.suite)
    reports = []
    for p in args.policy:
        spec = _agent_spec(p, not args.greedy)
        reports.append(evaluate(spec, suite, seeds_per_task=args.seeds_per_task))
    table = compare(reports, tol=args.tol) if len(reports) > 1 else None
    doc = {
        "config": {"command": "bench", "suite": [t.to_json() for t in suite], "policies": args.policy,
                   "seeds_per_task": args.seeds_per_task, "greedy": args.greedy, "tol": args.tol,
                   "version": __version__},
        "reports": [r.to_json() for r in reports],
    }
    if table is not None:
        doc["comparison"] = {f"{a} vs {b}": {"deltas": table.deltas[(a, b)], "summary": table.summary[(a, b)]}
                             for a, b in table.deltas}
    Path(args.report).write_text(_dump(doc))
    for r in reports:
        name = r.agent.get("name")
        for tid, tr in sorted(r.tasks.items()):
            rate = "error: " + tr.error if tr.error else f"{tr.success_rate:.3f}"
            print(f"{name:<12} {tid:<16} success {rate}")
    if table is not None:
        print(table.render(), end="")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tinyforge", description="Train and evaluate memory-based gridworld agents.")
    p.add_argument("--version", action="version", version=f"tinyforge {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-demos", help="write scripted-expert episodes as exchange files")
    g.add_argument("--task", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--suite", help="suite file (default: builtin)")
    g.set_defaults(fn=cmd_gen_demos)

    g = sub.add_parser("ingest", help="load exchange files into a store")
    g.add_argument("--input", required=True)
    g.add_argument("--store", required=True)
    g.add_argument("--clip-len", type=int, default=64)
    g.set_defaults(fn=cmd_ingest)

    g = sub.add_parser("inspect", help="list episodes, show a manifest, or search labels")
    g.add_argument("--store", required=True)
    g.add_argument("--episode", help="episode id as 32 hex digits")
    g.add_argument("--label")
    g.set_defaults(fn=cmd_inspect)

    g = sub.add_parser("train-bc", help="behavior-clone a policy from a store")
    g.add_argument("--store", required=True)
    g.add_argument("--config", help="JSON TrainConfig")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    g.add_argument("--checkpoint-dir")
    g.add_argument("--resume", help="checkpoint directory or ckpt_* stem")
    g.add_argument("--loss-curve", help="default: OUT.loss.txt")
    g.set_defaults(fn=cmd_train_bc)

    g = sub.add_parser("train-ppo", help="fine-tune a policy with KL-regularized PPO")
    g.add_argument("--task", required=True)
    g.add_argument("--anchor", required=True)
    g.add_argument("--config", help="JSON PPOConfig")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--metrics", help="default: OUT.metrics.jsonl")
    g.add_argument("--suite")
    g.set_defaults(fn=cmd_train_ppo)

    g = sub.add_parser("rollout", help="run episodes through the generator/filter/recorder pipeline")
    g.add_argument("--policy", required=True, help="policy file, 'expert' or 'random'")
    g.add_argument("--task", required=True)
    g.add_argument("--generators", type=int, default=1)
    g.add_argument("--episodes", type=int, required=True, help="episodes per generator")
    g.add_argument("--report", required=True)
    g.add_argument("--to-store")
    g.add_argument("--filter", action="append", default=[], help='e.g. success_only or \'["min_return", 5]\'')
    g.add_argument("--seed-base", type=int, default=0)
    g.add_argument("--queue-capacity", type=int, default=8)
    g.add_argument("--clip-len", type=int, default=64)
    g.add_argument("--id-salt", default="", help="distinguishes episode ids across runs with the same seeds")
    g.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    g.add_argument("--suite")
    g.set_defaults(fn=cmd_rollout)

    g = sub.add_parser("bench", help="evaluate agents on a task suite and compare them")
    g.add_argument("--suite", default="builtin", help="suite file or 'builtin'")
    g.add_argument("--policy", nargs="+", required=True, help="policy files, 'expert' or 'random'")
    g.add_argument("--report", required=True)
    g.add_argument("--seeds-per-task", type=int)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--tol", type=float, default=0.0)
    g.set_defaults(fn=cmd_bench)
    return p


def _setup_logging() -> None:
    raw = os.environ.get("TF_LOG_LEVEL", "warn").lower()
    if raw not in LOG_LEVELS:
        raise UsageError(f"TF_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=LOG_LEVELS[raw], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(LOG_LEVELS[raw])


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
