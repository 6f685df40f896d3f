"""Command-line entry point wiring the toolkit together.

Exit codes: 0 success, 1 domain failure (conformance violations, gate
failures, training errors), 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import models, tasks
from .distill import (
    DistillConfig, DistillError, distill, evaluate, init_from_teacher,
    plan_stages,
)
from .engine import EngineError, ExecutionContext, forward, random_inputs
from .ir import is_core, validate
from .legalize import (
    LegalizeConfig, LegalizeError, PASS_ORDER, PassTrace, legalize,
)
from .profiles import (
    ProfileError, blocking_violations, builtin_profile_names, check_profile,
    count_macs, load_profile,
)
from .quant import BitWidthConfig, QuantError, attach_fakequant
from .serialize import SchemaViolation, load_graph, save_graph

EXACT_GATE = 1e-5


def _write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=1)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        print(text)


def _cmd_build(args) -> int:
    overrides = {"seed": args.seed}
    if args.batch is not None:
        overrides["batch"] = args.batch
    g = models.build(args.template, **overrides)
    save_graph(g, args.out)
    report = validate(g)
    if not report.ok:
        print(report, file=sys.stderr)
        return 1
    print(f"wrote {args.out} ({len(g.nodes)} nodes)")
    return 0


def _cmd_inspect(args) -> int:
    g = load_graph(args.graph)
    report = validate(g)
    cost = count_macs(g)
    payload = {
        "nodes": len(g.nodes),
        "edges": len(g.edges),
        "inputs": g.graph_inputs,
        "outputs": g.graph_outputs,
        "weights": len(g.weights),
        "total_macs": cost.total_macs,
        "total_params": cost.total_params,
        "non_core_nodes": [n.id for n in g.nodes if not is_core(n)],
        "valid": report.ok,
        "issues": [f"{i.kind}: {i.where}: {i.message}" for i in report.issues],
    }
    _write_json(args.json, payload) if args.json else print(json.dumps(payload, indent=1))
    return 0 if report.ok else 1


def _cmd_check(args) -> int:
    g = load_graph(args.graph)
    profile = load_profile(args.profile)
    violations = check_profile(g, profile)
    blocking = blocking_violations(violations)
    payload = {
        "profile": profile.name,
        "deployable": not blocking,
        "violations": [str(v) for v in violations if v.blocking],
        "warnings": [str(v) for v in violations if not v.blocking],
    }
    _write_json(args.report, payload)
    return 0 if not blocking else 1


def _cmd_legalize(args) -> int:
    g = load_graph(args.input)
    if args.config:
        with open(args.config, "rb") as f:
            doc = tomllib.load(f)
        section = doc.get("legalize", doc)
        config = LegalizeConfig(
            channel_limit=int(section.get("channel_limit", 512)),
            replace_residual_add=bool(section.get("replace_residual_add", True)),
            insert_bn_relu_between_decomposed_convs=bool(
                section.get("insert_bn_relu_between_decomposed_convs", True)),
            pass_allowlist=section.get("pass_allowlist"),
            seed=int(section.get("seed", args.seed)),
        )
    else:
        config = LegalizeConfig(
            channel_limit=args.channel_limit,
            replace_residual_add=not args.keep_residual_add,
            insert_bn_relu_between_decomposed_convs=not args.no_bn_relu,
            seed=args.seed,
        )
    out, trace = legalize(g, config)
    save_graph(out, args.out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            f.write(trace.to_json())
    print(f"wrote {args.out}: {len(out.nodes)} nodes, "
          f"{len(trace.records)} rewrites")
    return 0


def _cmd_quantize(args) -> int:
    g = load_graph(args.input)
    config = BitWidthConfig.from_notation(
        args.bits, scheme=args.scheme,
        first_last_full_precision=not args.quantize_first_last)
    out = attach_fakequant(g, config)
    save_graph(out, args.out)
    print(f"wrote {args.out} ({config.notation}, {config.scheme})")
    return 0


def _make_data(section: dict):
    task = section.get("task", "classify10")
    size = int(section.get("size", 5000))
    seed = int(section.get("seed", 0))
    if task == "classify10":
        kw = {k: section[k] for k in ("image_size", "classes", "noise",
                                      "max_shift", "class_seed") if k in section}
        return tasks.make_classification_data(size, seed=seed, **kw), "top1_top5"
    if task in ("reverse", "copy"):
        kw = {k: section[k] for k in ("vocab", "seq_len") if k in section}
        return tasks.make_sequence_data(size, seed=seed, kind=task, **kw), \
            "sequence_accuracy"
    raise DistillError(f"unknown data task {task!r}")


def _cmd_distill(args) -> int:
    with open(args.config, "rb") as f:
        doc = tomllib.load(f)
    teacher = load_graph(args.teacher)
    student = load_graph(args.student)
    with open(args.trace, "r", encoding="utf-8") as f:
        trace = PassTrace.from_json(f.read())
    data, task = _make_data(doc.get("data", {}))
    d = doc.get("distill", {})
    config = DistillConfig(**{k: d[k] for k in d
                              if k in DistillConfig.__dataclass_fields__})
    q = doc.get("quant")
    if q:
        bits = BitWidthConfig.from_notation(
            q.get("bits", "2W4A"), scheme=q.get("scheme", "dorefa"),
            first_last_full_precision=q.get("first_last_full_precision", True))
        config.bit_config = bits
        from .ir import FakeQuant
        already = any(isinstance(n.kind, FakeQuant) and n.kind.bits < 32
                      for n in student.nodes) or \
            any("w_bits" in n.attrs for n in student.nodes)
        if not already:
            student = attach_fakequant(student, bits)
    family = doc.get("data", {}).get("family")
    if family is None:
        family = "transformer_like" if task == "sequence_accuracy" else "resnet_like"
    student = init_from_teacher(student, teacher, trace, seed=config.seed)
    plan = plan_stages(teacher, student, family, trace)
    trained, log = distill(teacher, student, plan, data.unlabeled(), config)
    save_graph(trained, args.out)
    if args.log:
        log.save(args.log)
    metrics = evaluate(trained, data, task)
    print(json.dumps({"out": args.out, "train_metrics": metrics}, indent=1))
    return 0


def _cmd_evaluate(args) -> int:
    g = load_graph(args.graph)
    if args.task == "top1_top5":
        data = tasks.make_classification_data(args.n, seed=args.data_seed,
                                              image_size=args.image_size)
    else:
        data = tasks.make_sequence_data(args.n, seed=args.data_seed, kind=args.kind,
                                        vocab=args.vocab, seq_len=args.seq_len)
    metrics = evaluate(g, data, args.task)
    print(json.dumps(metrics, indent=1))
    return 0


def _cmd_flops(args) -> int:
    if args.template:
        g = models.build(args.template, seed=args.seed)
    elif args.graph:
        g = load_graph(args.graph)
    else:
        print("flops: need --template or --graph", file=sys.stderr)
        return 2
    cost = count_macs(g)
    if args.json:
        per_node = dict(sorted(cost.per_node_macs.items(),
                               key=lambda kv: -kv[1])[:args.top])
        print(json.dumps({"total_macs": cost.total_macs,
                          "total_params": cost.total_params,
                          "top_nodes": per_node}, indent=1))
    else:
        print(f"total MACs: {cost.total_macs:.4g} ({cost.total_macs / 1e9:.3f} G), "
              f"params: {cost.total_params}")
    return 0


def _cmd_verify(args) -> int:
    g = load_graph(args.graph)
    config = LegalizeConfig(pass_allowlist=[args.pass_name], seed=args.seed)
    rewritten, trace = legalize(g, config)
    if not trace.records:
        print(f"pass {args.pass_name}: no rewrite sites in {args.graph}")
        return 0
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        inputs = random_inputs(g, rng)
        a = forward(g, inputs, ExecutionContext(mode="eval"))
        b = forward(rewritten, inputs, ExecutionContext(mode="eval"))
        for e in g.graph_outputs:
            worst = max(worst, float(np.max(np.abs(a.outputs[e] - b.outputs[e]))))
    exact = all(r.exact for r in trace.records)
    label = "exact" if exact else "approximate"
    print(f"pass {args.pass_name} ({label}, {len(trace.records)} sites, "
          f"{args.trials} trials): max abs diff {worst:.3e}")
    if exact and worst > EXACT_GATE:
        print(f"FAIL: exceeds exactness gate {EXACT_GATE}", file=sys.stderr)
        return 1
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corelower",
                                description="Lower neural-net graphs onto an "
                                "accelerator core operator set and re-train "
                                "them with blockwise distillation.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="instantiate a named architecture template")
    b.add_argument("--template", required=True, choices=models.template_names())
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--batch", type=int, default=None)
    b.set_defaults(fn=_cmd_build)

    i = sub.add_parser("inspect", help="summarize a graph file")
    i.add_argument("graph")
    i.add_argument("--json", metavar="PATH", default=None)
    i.set_defaults(fn=_cmd_inspect)

    c = sub.add_parser("check", help="check a graph against a chip profile")
    c.add_argument("--profile", required=True,
                   help=f"name ({', '.join(builtin_profile_names())}) or path")
    c.add_argument("graph")
    c.add_argument("--report", metavar="PATH", default=None)
    c.set_defaults(fn=_cmd_check)

    l = sub.add_parser("legalize", help="rewrite a graph onto the core operator set")
    l.add_argument("--in", dest="input", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--trace", default=None)
    l.add_argument("--config", default=None, help="TOML file with a [legalize] table")
    l.add_argument("--channel-limit", type=int, default=512)
    l.add_argument("--keep-residual-add", action="store_true")
    l.add_argument("--no-bn-relu", action="store_true",
                   help="no BN+ReLU between decomposed convolutions")
    l.add_argument("--seed", type=int, default=0)
    l.set_defaults(fn=_cmd_legalize)

    q = sub.add_parser("quantize", help="attach fake quantization")
    q.add_argument("--in", dest="input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--bits", required=True, help="e.g. 2W4A")
    q.add_argument("--scheme", choices=("dorefa", "lsq"), default="dorefa")
    q.add_argument("--quantize-first-last", action="store_true")
    q.set_defaults(fn=_cmd_quantize)

    d = sub.add_parser("distill", help="blockwise distillation of a student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--student", required=True)
    d.add_argument("--trace", required=True)
    d.add_argument("--config", required=True, help="TOML with [data] and [distill]")
    d.add_argument("--out", required=True)
    d.add_argument("--log", default=None, help="metrics CSV path")
    d.set_defaults(fn=_cmd_distill)

    e = sub.add_parser("evaluate", help="evaluate a graph on a synthetic task")
    e.add_argument("--graph", required=True)
    e.add_argument("--task", choices=("top1_top5", "sequence_accuracy"), required=True)
    e.add_argument("--kind", choices=("reverse", "copy"), default="reverse")
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--data-seed", type=int, default=99)
    e.add_argument("--image-size", type=int, default=32)
    e.add_argument("--vocab", type=int, default=32)
    e.add_argument("--seq-len", type=int, default=8)
    e.set_defaults(fn=_cmd_evaluate)

    f = sub.add_parser("flops", help="multiply-accumulate cost of a graph or template")
    f.add_argument("--template", choices=models.template_names(), default=None)
    f.add_argument("--graph", default=None)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--json", action="store_true")
    f.add_argument("--top", type=int, default=10)
    f.set_defaults(fn=_cmd_flops)

    v = sub.add_parser("verify", help="run one pass and compare source vs "
                       "rewritten outputs on random inputs")
    v.add_argument("--pass", dest="pass_name", required=True, choices=PASS_ORDER)
    v.add_argument("graph")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=_cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (LegalizeError, QuantError, ProfileError, DistillError, EngineError,
            SchemaViolation, models.InvalidTemplate, FileNotFoundError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
