"""Operator command line: generate / solve / train / evaluate / agreement /
transfer / permute / tune-baseline, driven by a YAML config plus flags.

Every command is reproducible: identical config and seed give byte-identical
primary outputs regardless of --workers, and each command writes a manifest
(config snapshot, version, seed, input hashes) beside its outputs. Exit codes:
0 success, 1 runtime failure, 2 config or validation error.
"""

from __future__ import annotations

import argparse
import os
import sys

import yaml

from . import __version__, evaluation, generators, offline, policies, serialize, training
from .graph_core import DatasetError, dataset_hash, read_dataset, write_dataset


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(section)


# Path-valued config keys; relative values resolve against the run directory
# (--out / `out:`) so one config drives a whole generate->solve->train->evaluate
# chain regardless of the caller's cwd.
_PATH_KEYS = (
    "dataset", "val_dataset", "checkpoint", "reference_checkpoint",
    "base_path", "genres_path", "ratings_path", "template_path",
    "output", "report", "report_permuted", "summary", "log", "cache", "val_cache",
)


def _resolve_section_paths(section: dict, out_dir: str | None) -> dict:
    if not out_dir:
        return section
    resolved = dict(section)
    for key in _PATH_KEYS:
        value = resolved.get(key)
        if isinstance(value, str) and value and not os.path.isabs(value):
            resolved[key] = os.path.abspath(os.path.join(out_dir, value))
    return resolved


def _resolve_out(path: str, out_dir: str | None) -> str:
    if out_dir and not os.path.isabs(path):
        path = os.path.join(out_dir, path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _require(section: dict, key: str, command: str):
    if key not in section or section[key] is None:
        raise ConfigError(f"{command}: missing required config key {key!r}")
    return section[key]


def _read_instances(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"dataset not found: {path}")
    return read_dataset(path)


def _limits(section: dict) -> offline.OracleLimits:
    return offline.OracleLimits(
        osbm_max_u=int(section.get("osbm_max_u", offline.DEFAULT_LIMITS.osbm_max_u)),
        osbm_max_v=int(section.get("osbm_max_v", offline.DEFAULT_LIMITS.osbm_max_v)),
        osbm_max_genres=int(
            section.get("osbm_max_genres", offline.DEFAULT_LIMITS.osbm_max_genres)
        ),
        osbm_node_budget=int(
            section.get("node_budget", offline.DEFAULT_LIMITS.osbm_node_budget)
        ),
    )


def _write_manifest(command: str, primary_output: str, seed: int, workers: int,
                    section: dict, inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "version": f"matchlab-{__version__}",
        "seed": seed,
        "workers": workers,
        "config": section,
        "inputs": {p: dataset_hash(p) for p in inputs if os.path.exists(p)},
        "outputs": sorted(outputs),
    }
    path = os.path.join(os.path.dirname(primary_output) or ".", f"{command}.manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize.dumps(manifest))
        f.write("\n")


def _gen_spec(section: dict, seed: int, command: str) -> generators.GenSpec:
    try:
        return generators.GenSpec(
            kind=_require(section, "kind", command),
            u_count=int(_require(section, "u_count", command)),
            v_count=int(_require(section, "v_count", command)),
            seed=seed,
            count=int(section.get("count", 1)),
            p=section.get("p"),
            base_path=section.get("base_path"),
            genres_path=section.get("genres_path"),
            ratings_path=section.get("ratings_path"),
            fixed_nodes=bool(section.get("fixed_nodes", True)),
            template_path=section.get("template_path"),
            bid_range=tuple(section.get("bid_range", (0.1, 0.4))),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_generate(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    spec = _gen_spec(section, seed, "generate")
    output = _resolve_out(_require(section, "output", "generate"), out_dir)
    instances = generators.generate_dataset(spec)
    write_dataset(instances, output)
    digest = dataset_hash(output)
    inputs = [p for p in (spec.base_path, spec.genres_path, spec.ratings_path,
                          spec.template_path) if p]
    _write_manifest("generate", output, seed, workers, section, inputs, [output])
    print(f"wrote {len(instances)} instances to {output}")
    print(f"dataset_hash {digest}")
    return 0


def _cache_path(section: dict, dataset_path: str, digest: str, out_dir: str | None) -> str:
    if section.get("cache"):
        return _resolve_out(section["cache"], out_dir)
    return offline.cache_path_for(dataset_path, digest)


def cmd_solve(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "solve")
    instances = _read_instances(dataset_path)
    digest = dataset_hash(dataset_path)
    cache_path = _cache_path(section, dataset_path, digest, out_dir)
    if os.path.exists(cache_path) and offline.load_cache(cache_path, digest) is None:
        backup = cache_path + ".bak"
        os.replace(cache_path, backup)
        print(f"cache was corrupted or stale; preserved as {backup}")
    entries = offline.ensure_oracle(instances, digest, cache_path, _limits(section), workers)
    refused = sum(1 for e in entries.values() if e.refused)
    _write_manifest("solve", cache_path, seed, workers, section, [dataset_path], [cache_path])
    print(f"solved {len(entries) - refused} instances, {refused} refused -> {cache_path}")
    if refused:
        print(f"warning: {refused} instances beyond oracle limits (upper bounds recorded)")
    return 0


def _load_policy_from(section: dict, instances, command: str) -> policies.PolicyModel:
    if section.get("checkpoint") and os.path.exists(section["checkpoint"]):
        policy, _ = policies.load_policy(section["checkpoint"])
        return policy
    if section.get("checkpoint"):
        raise ConfigError(f"{command}: checkpoint not found: {section['checkpoint']}")
    name = section.get("policy")
    if name in (None, ""):
        raise ConfigError(f"{command}: need either 'checkpoint' or 'policy'")
    if name == "greedy-t":
        return policies.make_policy("greedy-t", w_t=float(_require(section, "w_t", command)))
    if name == "greedy-rt":
        return policies.fit_greedy_rt(instances, rule=section.get("rt_rule", "divide_min"))
    if name in policies.BASELINE_KINDS:
        return policies.make_policy(name)
    raise ConfigError(f"{command}: unknown policy {name!r}")


def cmd_evaluate(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "evaluate")
    instances = _read_instances(dataset_path)
    digest = dataset_hash(dataset_path)
    cache_path = _cache_path(section, dataset_path, digest, out_dir)
    entries = offline.ensure_oracle(instances, digest, cache_path, _limits(section), workers)
    if section.get("policy") == "oracle":
        policy = evaluation.oracle_replay_policy(instances, entries)
    else:
        policy = _load_policy_from(section, instances, "evaluate")
    report = evaluation.evaluate(
        policy, instances, entries, digest, seed=seed, workers=workers
    )
    report_path = _resolve_out(section.get("report", "report.csv"), out_dir)
    summary_path = _resolve_out(section.get("summary", "summary.json"), out_dir)
    evaluation.write_report_csv(report, report_path)
    evaluation.write_summary(report, summary_path)
    _write_manifest(
        "evaluate", report_path, seed, workers, section, [dataset_path],
        [report_path, summary_path],
    )
    print(f"mean ratio {serialize.fmt_float(report.mean_ratio)} over {len(report.ratios)} instances")
    print(f"report {report_path}")
    return 0


def cmd_agreement(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "agreement")
    instances = _read_instances(dataset_path)
    digest = dataset_hash(dataset_path)
    policy = _load_policy_from(section, instances, "agreement")
    ref_name = section.get("reference", "oracle")
    if section.get("reference_checkpoint"):
        reference, _ = policies.load_policy(section["reference_checkpoint"])
    elif ref_name == "oracle":
        cache_path = _cache_path(section, dataset_path, digest, out_dir)
        entries = offline.ensure_oracle(instances, digest, cache_path, _limits(section), workers)
        refused = [i for i, e in entries.items() if e.refused]
        if refused:
            raise ConfigError(
                f"agreement: oracle refused {len(refused)} instances; shrink the dataset or limits"
            )
        reference = [entries[i].result.assignment for i in range(len(instances))]
    else:
        reference = _load_policy_from(
            dict(section, policy=ref_name, checkpoint=None), instances, "agreement"
        )
    curve = evaluation.agreement_curve(policy, reference, instances, seed=seed)
    output = _resolve_out(section.get("output", "agreement.csv"), out_dir)
    evaluation.write_agreement_csv(curve, output)
    _write_manifest("agreement", output, seed, workers, section, [dataset_path], [output])
    print(f"agreement curve ({len(curve)} steps) -> {output}")
    return 0


def cmd_transfer(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    policy = _load_policy_from(section, [], "transfer")
    sizes = [(int(u), int(v)) for u, v in _require(section, "sizes", "transfer")]
    gen = _section(section, "generator")
    count = int(gen.pop("count", 100))

    def make_spec(u: int, v: int) -> generators.GenSpec:
        return _gen_spec(dict(gen, u_count=u, v_count=v, count=count), seed, "transfer")

    grid = evaluation.transfer_eval(
        policy, sizes, make_spec, count=count, seed=seed, workers=workers
    )
    output = _resolve_out(section.get("output", "transfer.csv"), out_dir)
    with open(output, "w", encoding="utf-8", newline="\n") as f:
        f.write("u_count,v_count,mean_ratio\n")
        for (u, v) in sizes:
            cell = grid[(u, v)]
            val = "" if cell is None else serialize.fmt_float(cell)
            f.write(f"{u},{v},{val}\n")
    _write_manifest("transfer", output, seed, workers, section, [], [output])
    print(f"transfer grid ({len(sizes)} cells) -> {output}")
    return 0


def cmd_permute(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "permute")
    instances = _read_instances(dataset_path)
    digest = dataset_hash(dataset_path)
    policy = _load_policy_from(section, instances, "permute")
    cache_path = _cache_path(section, dataset_path, digest, out_dir)
    entries = offline.ensure_oracle(instances, digest, cache_path, _limits(section), workers)
    original, permuted = evaluation.permutation_stress(
        policy, instances, entries, digest, seed=seed, workers=workers
    )
    orig_path = _resolve_out(section.get("report", "permute_original.csv"), out_dir)
    perm_path = _resolve_out(section.get("report_permuted", "permute_permuted.csv"), out_dir)
    evaluation.write_report_csv(original, orig_path)
    evaluation.write_report_csv(permuted, perm_path)
    _write_manifest(
        "permute", orig_path, seed, workers, section, [dataset_path], [orig_path, perm_path]
    )
    print(
        "mean ratio original "
        f"{serialize.fmt_float(original.mean_ratio)} vs permuted "
        f"{serialize.fmt_float(permuted.mean_ratio)}"
    )
    return 0


def cmd_tune_baseline(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "tune-baseline")
    instances = _read_instances(dataset_path)
    w_t = policies.tune_threshold(instances)
    output = _resolve_out(section.get("output", "greedy_t.json"), out_dir)
    policies.save_policy(policies.make_policy("greedy-t", w_t=w_t), output)
    _write_manifest("tune-baseline", output, seed, workers, section, [dataset_path], [output])
    print(f"w_T = {serialize.fmt_float(w_t)}")
    print(f"checkpoint {output}")
    return 0


def cmd_train(section: dict, seed: int, workers: int, out_dir: str | None) -> int:
    dataset_path = _require(section, "dataset", "train")
    instances = _read_instances(dataset_path)
    digest = dataset_hash(dataset_path)
    kind = _require(section, "model", "train")
    if kind not in policies.NEURAL_KINDS:
        raise ConfigError(f"train: model must be one of {policies.NEURAL_KINDS}")
    config = training.TrainConfig(
        epochs=int(section.get("epochs", 300)),
        dataset_size=len(instances),
        batch_size=int(section.get("batch_size", 200)),
        learning_rate=float(section.get("learning_rate", 1e-3)),
        lr_decay=float(section.get("lr_decay", 0.98)),
        ema_beta=float(section.get("ema_beta", 0.8)),
        entropy_rate=float(section.get("entropy_rate", 1e-3)),
        seed=seed,
        eval_every=int(section.get("eval_every", 0)),
    )
    targets = None
    if kind == "ff-supervised":
        cache_path = _cache_path(section, dataset_path, digest, out_dir)
        entries = offline.ensure_oracle(instances, digest, cache_path, _limits(section), workers)
        refused = [i for i, e in entries.items() if e.refused]
        if refused:
            raise ConfigError(
                f"train: oracle refused {len(refused)} training instances; "
                "ff-supervised needs exact targets"
            )
        targets = [
            offline.hindsight_targets(instances[i], entries[i].result)
            for i in range(len(instances))
        ]
    val_instances = val_entries = None
    inputs = [dataset_path]
    if section.get("val_dataset"):
        val_path = section["val_dataset"]
        val_instances = _read_instances(val_path)
        val_digest = dataset_hash(val_path)
        val_cache = section.get("val_cache") or offline.cache_path_for(val_path, val_digest)
        val_entries = offline.ensure_oracle(
            val_instances, val_digest, val_cache, _limits(section), workers
        )
        inputs.append(val_path)
    checkpoint = _resolve_out(section.get("checkpoint", "model.json"), out_dir)
    log_path = _resolve_out(section.get("log", "train_log.csv"), out_dir)
    result = training.train(
        kind,
        instances,
        config,
        targets=targets,
        val_instances=val_instances,
        val_entries=val_entries,
        checkpoint_path=checkpoint,
        log_path=log_path,
        resume=bool(section.get("resume", False)),
    )
    outputs = [checkpoint, log_path]
    _write_manifest("train", checkpoint, seed, workers, section, inputs, outputs)
    if result.best_ratio is not None:
        print(f"best validation mean ratio {serialize.fmt_float(result.best_ratio)}")
    print(f"checkpoint {checkpoint}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "agreement": cmd_agreement,
    "transfer": cmd_transfer,
    "permute": cmd_permute,
    "tune-baseline": cmd_tune_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchlab",
        description="Online bipartite matching laboratory: datasets, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"matchlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--workers", type=int, help="worker pool size (default 1)")
        p.add_argument("--out", help="output directory for relative output paths")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        section = _section(cfg, args.command.replace("-", "_"))
        if not section:
            section = _section(cfg, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            raise ConfigError("seed is mandatory (config key 'seed' or --seed)")
        workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
        out_dir = args.out if args.out is not None else cfg.get("out")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        section = _resolve_section_paths(section, out_dir)
        return COMMANDS[args.command](section, int(seed), workers, out_dir)
    except (ConfigError, DatasetError, generators.GenerationError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
