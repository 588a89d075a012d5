"""Command line: quantize, report, eval, pipeline, compare.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 infeasible budget.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .accel import acceleration_report, mac_count_quantized, solve_budget
from .errors import ConfigError, PQAccelError
from .metrics import evaluate_dirs
from .model import Model
from .model_io import load_model, save_model
from .pipeline import (BoxDataset, StageSchedule, load_config, make_box_dataset, progressive_accelerate,
                       toy_hooks, train_toy_model)
from .quantizer import QuantizedLayer, QuantScheme, quantization_error, quantize_layer
from .synthetic import structured_model

TOY = "toy"


def _model(spec: str, seed: int = 0) -> Model:
    return structured_model(seed) if spec == TOY else load_model(spec)


def _csv(text: str) -> list[str]:
    return [t for t in (p.strip() for p in text.split(",")) if t]


def _layers(values) -> list[str]:
    out = []
    for v in values or []:
        out.extend(_csv(v))
    return out


def _params(text: str) -> dict:
    out = {}
    for item in _csv(text):
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--params entries look like key=value, got {item!r}")
        try:
            out[key.strip()] = int(val)
        except ValueError:
            raise ConfigError(f"--params value for {key!r} must be an integer") from None
    return out


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


def _groups(args, model: Model) -> list[str]:
    return _layers(args.groups) if args.groups else model.groups


def cmd_quantize(args) -> None:
    model = _model(args.model, args.seed)
    targets = _layers(args.layers)
    if not targets:
        raise ConfigError("--layers is empty")
    for name in targets:
        node = model[name]
        layer = node.op
        if isinstance(layer, QuantizedLayer) or not hasattr(layer, "weights"):
            raise ConfigError(f"layer {name!r} is not a dense conv layer")
        d = args.subspace_dim or layer.channels
        if args.params:
            scheme = QuantScheme(args.scheme, d, seed=args.seed, **_params(args.params))
        else:
            if node.input_hw is None:
                raise ConfigError(f"layer {name!r} has no input geometry; use --params")
            scheme = solve_budget(args.alpha, layer, node.input_hw, d, args.scheme,
                                  bool(args.count_lookups), seed=args.seed).scheme
        model = model.with_op(name, quantize_layer(layer, scheme))
    report = acceleration_report(model, layer_groups=model.groups, count_lookups=bool(args.count_lookups))
    if args.out:
        out = save_model(model, args.out)
        (out / "mac_report.json").write_text(report.to_json() + "\n")
    warnings = [w for n in targets for w in model[n].op.warnings]
    payload = report.to_dict() | {"warnings": warnings}
    _emit(args, payload, "\n".join([report.to_text()] + [f"warning: {w}" for w in warnings]))


def cmd_report(args) -> None:
    model = _model(args.model, args.seed)
    replaced = {}
    if args.quantized:
        q = load_model(args.quantized)
        replaced = {n.name: n.op for n in q.nodes if isinstance(n.op, QuantizedLayer)}
    report = acceleration_report(model, replaced, _groups(args, model), count_lookups=bool(args.count_lookups))
    _emit(args, report.to_dict(), report.to_text())


def cmd_eval(args) -> None:
    results, summary, breakdown = evaluate_dirs(args.pred, args.gt, args.tags, args.iou_thr, args.low_iou)
    payload = {"images": len(results), "metrics": summary.to_dict(), "errors": breakdown.to_dict()}
    lines = [f"images: {len(results)}",
             f"precision {summary.precision:.4f}  recall {summary.recall:.4f}  mAP {summary.mAP:.4f}"
             + ("" if summary.precision_defined else "  (precision undefined: no predictions)")]
    lines += [f"AP[{c}] {v:.4f}" for c, v in sorted(summary.ap.items())]
    lines.append("errors: " + "  ".join(f"{c}={n}({breakdown.source(c)})" for c, n in breakdown.counts.items()))
    lines.append(f"found share (A+B+C): {breakdown.found_share:.4f}")
    for scene, counts in sorted(breakdown.scenes.items()):
        lines.append(f"scene {scene}: " + "  ".join(f"{c}={n}" for c, n in counts.items()))
    lines += [f"warning: {w}" for w in summary.warnings]
    _emit(args, payload, "\n".join(lines))


def _toy_data(cfg: dict, seed: int) -> tuple[BoxDataset, BoxDataset]:
    data = cfg.get("data", {})
    train = make_box_dataset(int(data.get("train", 512)), seed=int(data.get("seed", seed)) + 100)
    val = make_box_dataset(int(data.get("val", 256)), seed=int(data.get("seed", seed)) + 200)
    return train, val


def cmd_pipeline(args) -> None:
    cfg = load_config(args.config)
    schedule = StageSchedule.from_dict(cfg)
    seed = schedule.seed if args.seed is None else args.seed
    schedule.seed = seed
    data = cfg.get("data", {})
    train, val = _toy_data(cfg, seed)
    spec = cfg.get("model", "toy-boxnet")
    if spec == "toy-boxnet":
        model = train_toy_model(seed, steps=int(data.get("pretrain_steps", 600)),
                                lr=float(data.get("pretrain_lr", 0.05)), train=train)
    else:
        model = load_model(Path(args.config).parent / spec)
    finetune, evaluate = toy_hooks(train, val, schedule.finetune, seed)
    results = progressive_accelerate(model, schedule, finetune, evaluate)
    payload = {"config": str(args.config), "seed": seed, "stages": [r.to_dict() for r in results]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stage_results.json").write_text(json.dumps(payload, indent=2) + "\n")
        save_model(results[-1].model, out / "model")
    lines = [f"{'stage':>5}  {'quantized':<24}{'accelerated MACs':>18}{'reduction %':>13}  metrics"]
    for r in results:
        metrics = "  ".join(f"{k}={v:.4f}" for k, v in sorted(r.metrics.items()))
        lines.append(f"{r.index:>5}  {','.join(r.quantized) or '-':<24}{r.macs.total_accelerated:>18d}"
                     f"{r.macs.total_reduction:>13.4f}  {metrics}")
    _emit(args, payload, "\n".join(lines))


def cmd_compare(args) -> None:
    model = _model(args.model, args.seed)
    alphas = [float(a) for a in _csv(args.alphas)]
    rows = []
    for name in _layers(args.layers) or [n.name for n in model.nodes if n.target]:
        node = model[name]
        layer = node.op
        d = args.subspace_dim or layer.channels
        for alpha in alphas:
            row = {"layer": name, "alpha": alpha, "subspace_dim": d}
            for kind in ("vq", "dl"):
                sol = solve_budget(alpha, layer, node.input_hw, d, kind, bool(args.count_lookups), seed=args.seed)
                q = quantize_layer(layer, sol.scheme)
                row[kind] = {"scheme": sol.scheme.to_dict(),
                             "macs": mac_count_quantized(q, node.input_hw, bool(args.count_lookups)),
                             "ratio": round(sol.ratio, 4), "error": round(quantization_error(layer, q), 4)}
            row["dl_wins"] = row["dl"]["error"] <= row["vq"]["error"]
            rows.append(row)
    wins = sum(r["dl_wins"] for r in rows)
    lines = [f"{'layer':<10}{'alpha':>7}{'d':>5}{'K_vq':>7}{'VQ MACs':>12}{'VQ err':>10}"
             f"{'L/K/rho':>14}{'DL MACs':>12}{'DL err':>10}  winner"]
    for r in rows:
        v, s = r["vq"], r["dl"]
        ds = s["scheme"]
        lkr = f"{ds['l_dl']}/{ds['k_dl']}/{ds['rho']}"
        lines.append(f"{r['layer']:<10}{r['alpha']:>7.1f}{r['subspace_dim']:>5}{v['scheme']['k_vq']:>7}"
                     f"{v['macs']:>12}{v['error']:>10.4f}{lkr:>14}"
                     f"{s['macs']:>12}{s['error']:>10.4f}  {'DL' if r['dl_wins'] else 'VQ'}")
    lines.append(f"DL error <= VQ error in {wins}/{len(rows)} rows")
    _emit(args, {"rows": rows, "dl_wins": wins, "rows_total": len(rows)}, "\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqaccel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def lookups(p):
        p.add_argument("--count-lookups", type=int, choices=(0, 1), default=1,
                       help="count each table lookup-accumulate as one MAC (default 1)")

    def common(p, seed_default=0):
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.add_argument("--seed", type=int, default=seed_default)
        return p

    p = common(sub.add_parser("quantize", help="quantize layers and write the model"))
    p.add_argument("--model", required=True, help="model directory, or 'toy'")
    p.add_argument("--layers", nargs="+", required=True)
    p.add_argument("--scheme", choices=("vq", "dl"), required=True)
    how = p.add_mutually_exclusive_group(required=True)
    how.add_argument("--alpha", type=float, help="target acceleration ratio per layer")
    how.add_argument("--params", help="explicit codebook sizes, e.g. k_vq=64 or l_dl=8,k_dl=128,rho=2")
    p.add_argument("--subspace-dim", type=int, default=None, help="sub-vector length d (default: all channels)")
    lookups(p)
    p.add_argument("--out", help="output model directory")
    p.set_defaults(func=cmd_quantize)

    p = common(sub.add_parser("report", help="MAC report with group roll-ups"))
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", help="model directory whose quantized layers replace the originals")
    p.add_argument("--groups", nargs="*", help="groups to roll up (default: all)")
    lookups(p)
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("eval", help="detection metrics and error breakdown"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tags")
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.add_argument("--low-iou", type=float, default=0.1, help="B/D band boundary")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("pipeline", help="progressive acceleration from a JSON config"), None)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pipeline)

    p = common(sub.add_parser("compare", help="VQ vs DL error at equal MAC budgets"))
    p.add_argument("--model", required=True)
    p.add_argument("--layers", nargs="*")
    p.add_argument("--alphas", default="8,10,12,20")
    p.add_argument("--subspace-dim", type=int, default=None)
    lookups(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PQAccelError as exc:
        print(f"pqaccel {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
