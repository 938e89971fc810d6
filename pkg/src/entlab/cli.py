"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 divergence
detected during training. Every command prints its resolved configuration
(and seed, where one applies) before doing work. File outputs are atomic.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, restore_model
from .data import TokenizerInfo, check_stream_length, detokenize, ingest
from .entropy import EntropyMatrix, bucket_fractions, export_heatmap, model_entropy, read_entropy_csv
from .model import ConfigError, NAMED_CONFIGS, make_config, model_forward
from .picost import CostModel, default_cost_model, estimate
from .trainer import Trainer, evaluate, load_train_config


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1, matching the documented code scheme
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _env_seed(default=0):
    raw = os.environ.get("ENTLAB_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"ENTLAB_SEED must be an integer, got {raw!r}") from None


def _print_resolved(command, resolved, seed=None):
    print(f"resolved config ({command}): {json.dumps(resolved, sort_keys=True)}")
    print(f"seed: {seed if seed is not None else 'n/a'}")


def build_parser():
    p = _Parser(prog="entlab", description="entropy-guided attention laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint base path to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    a = sub.add_parser("analyze", help="entropy matrix of one forward pass, to CSV")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)

    b = sub.add_parser("buckets", help="entropy bucket fractions from a CSV")
    b.add_argument("--entropy", required=True)

    h = sub.add_parser("heatmap", help="render an entropy CSV as SVG")
    h.add_argument("--entropy", required=True)
    h.add_argument("--out", required=True)

    c = sub.add_parser("pi-cost", help="op inventory, FLOPs, and cost estimate")
    c.add_argument("--arch", required=True, choices=sorted(NAMED_CONFIGS))
    c.add_argument("--layers", type=int, default=12)
    c.add_argument("--heads", type=int, default=12)
    c.add_argument("--dmodel", type=int, default=768)
    c.add_argument("--ctx", type=int, default=128)
    c.add_argument("--vocab", type=int, default=50257)
    c.add_argument("--cost-model", default=None, help="JSON cost model (default: calibrated)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--op", default=None, help="run a single named case")
    g.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("generate", help="sample text from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--tokens", type=int, default=64)
    s.add_argument("--temp", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=None)

    return p


# ------------------------------------------------------------- subcommands


def _cmd_train(args):
    cfg = load_train_config(args.config)
    with open(args.config) as f:
        doc = json.load(f)
    if "seed" not in doc:
        cfg.seed = _env_seed(cfg.seed)
    _print_resolved("train", cfg.to_dict(), cfg.seed)
    trainer = Trainer(cfg, resume=args.resume)
    summary = trainer.run()
    print(f"finished at step {summary.final_step}; metrics in {summary.out_dir}/metrics.jsonl")
    if summary.diverged:
        print("divergence detected; final state saved", file=sys.stderr)
        return 2
    return 0


def _load_bundle(path):
    bundle = load_checkpoint(path)
    params, theta = restore_model(bundle)
    params.training = False
    tok = TokenizerInfo.from_manifest(bundle.manifest["tokenizer"])
    return bundle, params, theta, tok


def _cmd_eval(args):
    bundle, params, _, tok = _load_bundle(args.checkpoint)
    _print_resolved("eval", {"checkpoint": args.checkpoint, "data": args.data,
                             "arch": bundle.manifest["arch"]})
    stream, data_tok = ingest(args.data, tok.kind)
    if data_tok.vocab_size > params.cfg.vocab_size:
        raise ConfigError(
            f"data vocabulary {data_tok.vocab_size} exceeds model vocab {params.cfg.vocab_size}"
        )
    result = evaluate(params, stream, params.cfg.T)
    em = result["entropy_matrix"]
    doc = {"eval_ce": result["eval_ce"], "perplexity": result["perplexity"]}
    if em is not None:
        doc["layer_entropy"] = [float(v) for v in em.values.mean(axis=1)]
        doc["bucket_fractions"] = list(bucket_fractions(em).fractions)
    print(json.dumps(doc))
    return 0


def _cmd_analyze(args):
    bundle, params, _, tok = _load_bundle(args.checkpoint)
    _print_resolved("analyze", {"checkpoint": args.checkpoint, "data": args.data,
                                "out": args.out, "arch": bundle.manifest["arch"]})
    stream, data_tok = ingest(args.data, tok.kind)
    if data_tok.vocab_size > params.cfg.vocab_size:
        raise ConfigError(
            f"data vocabulary {data_tok.vocab_size} exceeds model vocab {params.cfg.vocab_size}"
        )
    T = params.cfg.T
    check_stream_length(stream, T)
    window = stream[: T].reshape(1, T)
    with ad.no_grad():
        trace = model_forward(params, window, want_attention=True)
    em = model_entropy(trace)
    export_heatmap(em, args.out, fmt="csv")
    print(f"wrote {args.out} ({em.values.shape[0]} layers x {em.values.shape[1]} heads)")
    return 0


def _em_from_csv(path):
    # the CSV carries no context length; back out a scale top >= the data
    vals = read_entropy_csv(path)
    t_est = max(2, math.ceil(math.exp(float(vals.max()))))
    return EntropyMatrix(vals, t_est)


def _cmd_buckets(args):
    _print_resolved("buckets", {"entropy": args.entropy})
    em = _em_from_csv(args.entropy)
    summary = bucket_fractions(em)
    lo, mid, hi = summary.fractions
    print(f"low    (<= max/4):      {lo:.4f}")
    print(f"middle (max/4..3/4):    {mid:.4f}")
    print(f"high   (>= 3*max/4):    {hi:.4f}")
    print(json.dumps({"fractions": [lo, mid, hi], "reference_max": summary.reference_max}))
    return 0


def _cmd_heatmap(args):
    _print_resolved("heatmap", {"entropy": args.entropy, "out": args.out})
    em = _em_from_csv(args.entropy)
    export_heatmap(em, args.out, fmt="svg")
    print(f"wrote {args.out}")
    return 0


def _cmd_pi_cost(args):
    cfg = make_config(args.arch, L=args.layers, H=args.heads, d=args.dmodel,
                      T=args.ctx, vocab_size=args.vocab)
    _print_resolved("pi-cost", {"arch": args.arch, **cfg.to_dict(),
                                "cost_model": args.cost_model or "default-calibrated"})
    model = CostModel.load(args.cost_model) if args.cost_model else default_cost_model()
    report = estimate(cfg, model)
    fmt_x = lambda v: f"{v:.2f}x" if isinstance(v, float) else v
    print(f"{'op':<12}{'count':>8}  shape")
    for kind, count, shape in report.inventory.entries:
        print(f"{kind:<12}{count:>8}  {tuple(shape)}")
    print(f"ffn_flops      {report.ffn_flops:,}")
    print(f"attn_flops     {report.attn_flops:,}")
    print(f"est_comm_gb    {report.est_comm_gb:.2f}")
    print(f"est_latency_min {report.est_latency_min:.2f}")
    print(f"savings vs {report.baseline}: comm {fmt_x(report.savings_comm)}, "
          f"latency {fmt_x(report.savings_latency)}")
    print(json.dumps(report.to_jsonable()))
    return 0


def _cmd_gradcheck(args):
    from . import gradcheck as gc

    seed = args.seed if args.seed is not None else _env_seed(0)
    _print_resolved("gradcheck", {"op": args.op or "all"}, seed)
    try:
        results = gc.run(op_filter=args.op, seed=seed)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    ok = gc.report(results)
    return 0 if ok else 1


def _cmd_generate(args):
    if args.tokens < 0:
        raise ConfigError(f"--tokens must be >= 0, got {args.tokens}")
    if args.temp < 0:
        raise ConfigError(f"--temp must be >= 0, got {args.temp}")
    seed = args.seed if args.seed is not None else _env_seed(0)
    _print_resolved("generate", {"checkpoint": args.checkpoint, "prompt": args.prompt,
                                 "tokens": args.tokens, "temp": args.temp}, seed)
    bundle, params, _, tok = _load_bundle(args.checkpoint)
    ids = list(tok.encode(args.prompt))
    if not ids:
        raise ConfigError("prompt encodes to zero tokens")
    rng = np.random.default_rng(seed)
    T = params.cfg.T
    for _ in range(args.tokens):
        window = np.array(ids[-T:], dtype=np.int64).reshape(1, -1)
        with ad.no_grad():
            trace = model_forward(params, window, want_attention=False)
        logits = trace.logits.data[0, -1]
        if args.temp == 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / args.temp
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            nxt = int(rng.choice(len(probs), p=probs))
        ids.append(nxt)
    print(detokenize(np.array(ids, dtype=np.int64), tok))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "buckets": _cmd_buckets,
    "heatmap": _cmd_heatmap,
    "pi-cost": _cmd_pi_cost,
    "gradcheck": _cmd_gradcheck,
    "generate": _cmd_generate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
