"""Command line front end.

Subcommands: verify (correctness suites, JSON report, nonzero exit on
failure), bench (timing sweep to CSV + schema-validated JSON),
mqar-train / mqar-eval (recall task runs with JSONL logs and binary
checkpoints), mask-dump (per-head mask matrices as CSV heatmap data).
Reports carry no timestamps; identical seeds give identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bench as bench_mod
from . import kernels, mqar, verify


def _add_common(p, *, dtype_default="f64"):
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--threads", type=int, default=4, help="kernel threads")
    p.add_argument("--dtype", choices=["f32", "f64"], default=dtype_default)
    p.add_argument("--out", default=None, help="output path (or directory)")
    p.add_argument("--config", default=None, help="JSON config file")


def _read_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _emit(text: str, out_path):
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_verify(args) -> int:
    kernels.use_threads(args.threads)
    cfg = _read_config(args.config)
    report = verify.run_verify(
        seed=args.seed,
        dtype=args.dtype,
        forward_instances=int(cfg.get("forward_instances", 20)),
        grad_instances=int(cfg.get("grad_instances", 5)),
        mask_rows=int(cfg.get("mask_rows", 300)),
        skip_instances=int(cfg.get("skip_instances", 10)),
        fault=args.fault_inject,
    )
    _emit(json.dumps(report, sort_keys=True, indent=2) + "\n", args.out)
    if not report["passed"]:
        failing = [name for name, s in report["suites"].items() if not s["passed"]]
        print(f"verify FAILED: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


def _load_schema():
    here = os.path.dirname(__file__)
    with open(os.path.join(here, "schemas", "bench_results.schema.json"), encoding="utf-8") as f:
        return json.load(f)


def cmd_bench(args) -> int:
    cfg = _read_config(args.config)
    raw_cases = cfg.get("cases") if isinstance(cfg, dict) else cfg
    if raw_cases:
        cases = [bench_mod.BenchCase(**c) for c in raw_cases]
    else:
        cases = bench_mod.default_cases()

    results = []
    for case in cases:
        res = bench_mod.run_case(case)
        results.append(res)
        status = "ok" if res.valid else "INVALID"
        line = (f"{case.name}: dense={res.dense_ms} ms sparse={res.sparse_ms} ms "
                f"speedup={res.speedup} skipped={res.blocks_skipped_fraction:.4f} [{status}]")
        print(line, file=sys.stderr)

    payload = {"schema_version": 1, "results": [r.as_dict() for r in results]}
    import jsonschema

    jsonschema.validate(payload, _load_schema())

    prefix = args.out or "bench_results"
    with open(prefix + ".json", "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(prefix + ".csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=bench_mod.CSV_COLUMNS)
        writer.writeheader()
        for r in results:
            writer.writerow(bench_mod.result_row(r))
    print(f"wrote {prefix}.json and {prefix}.csv", file=sys.stderr)
    return 0 if all(r.valid for r in results) else 1


def _train_config(args):
    cfg = _read_config(args.config)
    spec_kw = dict(cfg.get("spec", {}))
    spec_kw.setdefault("seed", args.seed)
    model_kw = dict(cfg.get("model", {}))
    model_kw.setdefault("seed", args.seed)
    train_kw = dict(cfg.get("train", {}))
    spec = mqar.MqarSpec(**spec_kw)
    model_kw.setdefault("vocab_size", spec.vocab_size)
    mcfg = mqar.ModelConfig(**model_kw)
    if mcfg.vocab_size < spec.vocab_size:
        raise mqar.CapacityError("model vocab smaller than task vocab")
    return spec, mcfg, train_kw


def cmd_mqar_train(args) -> int:
    if args.dtype != "f64":
        print("mqar-train runs in f64 only", file=sys.stderr)
        return 2
    kernels.use_threads(args.threads)
    spec, mcfg, train_kw = _train_config(args)
    out_dir = args.out or "mqar_run"
    os.makedirs(out_dir, exist_ok=True)

    data = mqar.generate_mqar(spec)
    model = mqar.build_model(mcfg)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    header = {
        "record": "header",
        "spec": asdict(spec),
        "model": asdict(mcfg),
        "train": {
            "epochs": int(train_kw.get("epochs", 60)),
            "lr": float(train_kw.get("lr", 3e-3)),
            "optimizer": train_kw.get("optimizer", "adamw-lite"),
            "batch_size": int(train_kw.get("batch_size", 64)),
            "weight_decay": float(train_kw.get("weight_decay", 0.01)),
        },
    }
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
    tkw = header["train"]
    log = mqar.train(
        model, data.train, tkw["epochs"], tkw["lr"], tkw["optimizer"],
        batch_size=tkw["batch_size"], weight_decay=tkw["weight_decay"],
        shuffle_seed=spec.seed, log_path=log_path,
    )
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    mqar.save_checkpoint(ckpt, model, extra={"spec": asdict(spec)})
    result = {
        "final_train": log[-1],
        "test": mqar.evaluate(model, data.test),
        "checkpoint": "checkpoint.bin",
    }
    with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"test accuracy {result['test']['accuracy']:.4f}", file=sys.stderr)
    return 0


def cmd_mqar_eval(args) -> int:
    kernels.use_threads(args.threads)
    model = mqar.load_checkpoint(args.checkpoint)
    header = mqar.read_checkpoint_header(args.checkpoint)
    cfg = _read_config(args.config)
    spec_kw = cfg.get("spec") or header.get("extra", {}).get("spec")
    if spec_kw is None:
        print("no task spec: pass --config with a 'spec' entry", file=sys.stderr)
        return 2
    spec = mqar.MqarSpec(**spec_kw)
    data = mqar.generate_mqar(spec)
    result = {
        "checkpoint": os.path.basename(args.checkpoint),
        "spec": asdict(spec),
        "test": mqar.evaluate(model, data.test),
    }
    _emit(json.dumps(result, sort_keys=True, indent=2) + "\n", args.out)
    return 0


def _probe_tokens(args, spec):
    if args.probe:
        toks = np.array([int(x) for x in args.probe.split(",")], dtype=np.int64)
        return toks
    if spec is not None:
        data = mqar.generate_mqar(spec)
        return data.test.tokens[0]
    rng = np.random.default_rng(args.seed)
    return rng.integers(0, args.vocab_size, size=args.probe_len, dtype=np.int64)


def cmd_mask_dump(args) -> int:
    kernels.use_threads(args.threads)
    spec = None
    if args.checkpoint:
        model = mqar.load_checkpoint(args.checkpoint)
        header = mqar.read_checkpoint_header(args.checkpoint)
        spec_kw = header.get("extra", {}).get("spec")
        if spec_kw:
            spec = mqar.MqarSpec(**spec_kw)
    else:
        cfg = _read_config(args.config)
        model_kw = dict(cfg.get("model", cfg if cfg else {}))
        model_kw.setdefault("seed", args.seed)
        model = mqar.build_model(mqar.ModelConfig(**model_kw))
    args.vocab_size = model.cfg.vocab_size

    tokens = _probe_tokens(args, spec)
    if np.any(tokens < 0) or np.any(tokens >= model.cfg.vocab_size):
        print(f"probe tokens outside vocab [0, {model.cfg.vocab_size})", file=sys.stderr)
        return 2
    masks = mqar.layer_masks(model, tokens)

    out_dir = args.out or "mask_dump"
    os.makedirs(out_dir, exist_ok=True)
    layer_ids = range(len(masks)) if args.layer is None else [args.layer]
    written = []
    for li in layer_ids:
        bias = masks[li].bias
        for h in range(model.cfg.n_heads):
            name = f"layer{li}_head{h}.csv"
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                for row in bias[h]:
                    writer.writerow(["" if not np.isfinite(x) else repr(float(x)) for x in row])
            written.append(name)
    meta = {
        "probe_tokens": tokens.tolist(),
        "layers": len(masks),
        "n_heads": model.cfg.n_heads,
        "files": written,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {len(written)} matrices to {out_dir}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmask",
        description="content-masked sparse attention: verification, timing, recall runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run correctness suites, emit JSON report")
    _add_common(p)
    p.add_argument("--fault-inject", choices=verify.FAULTS, default=None,
                   help="corrupt one instance to prove the checks can fail")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="time dense vs block-skipping paths")
    _add_common(p, dtype_default="f32")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("mqar-train", help="train the tiny model on recall data")
    _add_common(p)
    p.set_defaults(fn=cmd_mqar_train)

    p = sub.add_parser("mqar-eval", help="evaluate a checkpoint on fresh data")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_mqar_eval)

    p = sub.add_parser("mask-dump", help="dump per-head mask matrices as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--probe", default=None, help="comma-separated token ids")
    p.add_argument("--probe-len", type=int, default=32)
    p.add_argument("--layer", type=int, default=None)
    p.set_defaults(fn=cmd_mask_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
