"""Command-line entry point: ``phasemem <command> [options]``.

Settings resolve as built-in defaults < ``--config`` JSON file < flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, checkpoint
from .exceptions import PhaseMemError
from .model import NOMINAL_SCALE, SWEEP_CONFIGS, ModelConfig, PhaseLM, count_params, match_sam_config, state_rank_trace
from .train import (
    Corpus,
    GenerationLog,
    MetricsLog,
    SamplerConfig,
    TrainConfig,
    Trainer,
    decode,
    encode,
    evaluate,
    generate,
    make_optimizer,
    repetition_metrics,
    set_threads,
)

log = logging.getLogger("phasemem")


class UsageError(Exception):
    """Bad paths or settings detected before any work starts."""


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, S):
    p.add_argument("--config", default=S(None), metavar="FILE", help="JSON settings file (flags override it)")
    p.add_argument("--seed", type=int, default=S(0), help="single source of randomness")
    p.add_argument("--threads", type=int, default=S(1), help="intra-op threads (1 = deterministic)")
    p.add_argument("--log-level", default=S("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _model_flags(p, S):
    g = p.add_argument_group("model")
    g.add_argument("--arch", choices=["pam", "sam"], default=S("pam"), help="complex PAM or real-valued SAM")
    g.add_argument("--dim", type=int, default=S(64))
    g.add_argument("--layers", type=int, default=S(4))
    g.add_argument("--heads", type=int, default=S(2))
    g.add_argument("--head-dim", type=int, default=S(16))
    g.add_argument("--vocab-size", type=int, default=S(256))
    g.add_argument("--expansion", type=int, default=S(3))
    g.add_argument("--rope-base", type=float, default=S(10000.0))


def _sampler_flags(p, S):
    g = p.add_argument_group("sampling")
    g.add_argument("--temperature", type=float, default=S(1.0))
    g.add_argument("--top-k", type=int, default=S(50))
    g.add_argument("--top-p", type=float, default=S(0.9))
    g.add_argument("--repetition-penalty", type=float, default=S(1.2))
    g.add_argument("--greedy", action="store_true", default=S(False))


def build_parser(suppress=False):
    """The full parser; ``suppress=True`` drops defaults to detect explicit flags."""
    S = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    root = argparse.ArgumentParser(prog="phasemem", description="Phase-associative memory language models.",
                                   formatter_class=fmt)
    sub = root.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        _common(p, S)
        return p

    p = cmd("train", "Train a model and write checkpoints plus a metrics CSV.")
    _model_flags(p, S)
    p.add_argument("--match-params", default=S(None), metavar="PAM_JSON",
                   help="with --arch sam: size the model to match this PAM model config")
    p.add_argument("--corpus", default=S(None), help="raw byte file or pre-tokenized token file")
    p.add_argument("--val-fraction", type=float, default=S(0.1))
    g = p.add_argument_group("optimization")
    g.add_argument("--lr", type=float, default=S(3e-5))
    g.add_argument("--weight-decay", type=float, default=S(0.01))
    g.add_argument("--warmup", type=int, default=S(500))
    g.add_argument("--batch-size", type=int, default=S(8))
    g.add_argument("--seq-len", type=int, default=S(512))
    g.add_argument("--epochs", type=int, default=S(10))
    g.add_argument("--max-steps", type=int, default=S(None), help="stop after this many steps")
    g.add_argument("--grad-clip", type=float, default=S(1.0))
    g.add_argument("--eval-every", type=int, default=S(None), help="extra validation cadence in steps")
    g.add_argument("--eval-batches", type=int, default=S(None), help="cap on validation batches")
    g.add_argument("--log-every", type=int, default=S(10))
    o = p.add_argument_group("outputs")
    o.add_argument("--out-dir", default=S("runs/train"))
    o.add_argument("--checkpoint-every", type=int, default=S(None))
    o.add_argument("--resume", default=S(None), metavar="CKPT", help="continue from this checkpoint")
    o.add_argument("--sample-every", type=int, default=S(None), help="write a generation sample every N steps")
    o.add_argument("--sample-prompt", default=S("The "))
    _sampler_flags(p, S)

    p = cmd("eval", "Validation loss and perplexity of a checkpoint.")
    p.add_argument("--checkpoint", default=S(None))
    p.add_argument("--corpus", default=S(None))
    p.add_argument("--split", choices=["train", "validation"], default=S("validation"))
    p.add_argument("--val-fraction", type=float, default=S(0.1))
    p.add_argument("--seq-len", type=int, default=S(512))
    p.add_argument("--batch-size", type=int, default=S(8))
    p.add_argument("--max-batches", type=int, default=S(None))
    p.add_argument("--output", default=S(None), help="optional JSON report path")

    p = cmd("generate", "Sample text from a checkpoint.")
    p.add_argument("--checkpoint", default=S(None))
    p.add_argument("--prompt", default=S("The "))
    p.add_argument("--max-new", type=int, default=S(64))
    _sampler_flags(p, S)

    p = cmd("verify", "Run the property self-check suite.")
    p.add_argument("--precision", choices=["64", "32"], default=S("64"))
    p.add_argument("--seeds", type=int, default=S(10), help="random seeds for the dual-form checks")
    p.add_argument("--inject-fault", type=float, nargs="?", const=1e-3, default=S(0.0),
                   help="perturb the parallel decay matrix by this relative amount (self-test)")

    p = cmd("count-params", "Trainable parameter count of a model config.")
    _model_flags(p, S)
    p.add_argument("--sweep", action="store_true", default=S(False),
                   help="list the 5M-100M reference sweep configurations instead")

    p = cmd("match-sam", "Find the real-valued config matching a PAM config's size.")
    _model_flags(p, S)
    p.add_argument("--tolerance", type=float, default=S(0.02))
    p.add_argument("--sweep", action="store_true", default=S(False), help="match every reference sweep config")

    pa = sub.add_parser("analyze", help="State, embedding, entropy and scaling diagnostics.", formatter_class=fmt)
    asub = pa.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")

    def acmd(name, help_):
        q = asub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        _common(q, S)
        return q

    q = acmd("state-rank", "Effective rank of every memory state along a token stream.")
    q.add_argument("--checkpoint", default=S(None), help="omit for a freshly initialized model")
    _model_flags(q, S)
    q.add_argument("--text", default=S(None), help="text file to stream (default: random tokens)")
    q.add_argument("--length", type=int, default=S(512))
    q.add_argument("--output", default=S("state_rank.csv"))

    q = acmd("phase", "Phase difference and coherence of word-pair embeddings.")
    q.add_argument("--checkpoint", default=S(None))
    q.add_argument("--pairs", default=S(None), help="TSV lines: word_a, word_b, label")
    q.add_argument("--output", default=S("phase_pairs.csv"))

    q = acmd("decoherence", "Entropies of the mixed 3-state example and the floor bound.")
    q.add_argument("--example-p", type=float, default=S(0.0), help="mixing fraction p in [0, 1]")
    q.add_argument("--grid", action="store_true", default=S(False), help="print p = 0, 0.1, ..., 1")
    q.add_argument("--e-real", type=float, default=S(None), help="real-valued loss floor (nats) for the bound")
    q.add_argument("--d-eff", type=float, default=S(None), help="effective dimension for the bound")
    q.add_argument("--bits", action="store_true", default=S(False), help="report bits instead of nats")

    q = acmd("scaling", "Log-log power-law fits and their crossover.")
    q.add_argument("--input", default=S(None), help="CSV with params, metric, std, label")
    q.add_argument("--space", choices=["loss", "ppl"], default=S("loss"))
    q.add_argument("--output", default=S(None), help="JSON report path (default: stdout only)")
    return root


def _flatten(d, out=None):
    out = {} if out is None else out
    for k, v in d.items():
        if isinstance(v, dict):
            _flatten(v, out)
        else:
            out[k.replace("-", "_")] = v
    return out


def _all_settings(parser):
    names = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                names |= _all_settings(sub)
        elif action.dest not in ("help", argparse.SUPPRESS):
            names.add(action.dest)
    return names


def resolve(argv):
    """Parse ``argv`` and merge defaults < config file < explicit flags."""
    args = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            from_file = _flatten(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(from_file) - _all_settings(build_parser())
        if unknown:
            raise UsageError(f"{path}: unknown settings {sorted(unknown)}")
        # one file may serve several commands; take only what this command defines
        for k, v in from_file.items():
            if k in vars(args) and k not in explicit:
                setattr(args, k, v)
    return args


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _need_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def model_config(args):
    return ModelConfig(dim=args.dim, n_layers=args.layers, n_heads=args.heads, head_dim=args.head_dim,
                       vocab_size=args.vocab_size, expansion=args.expansion, rope_base=args.rope_base,
                       arithmetic="complex" if args.arch == "pam" else "real", seed=args.seed)


def sampler_config(args, max_new=64):
    return SamplerConfig(temperature=args.temperature, top_k=args.top_k, top_p=args.top_p,
                         repetition_penalty=args.repetition_penalty, max_new_tokens=max_new,
                         greedy=args.greedy)


def _settings(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level",)}


def _load(path):
    model, header, _ = checkpoint.load(_need_file(path, "checkpoint"))
    return model, header


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args):
    corpus_path = _need_file(args.corpus, "corpus")
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, warmup_steps=args.warmup,
                       batch_size=args.batch_size, seq_len=args.seq_len, epochs=args.epochs,
                       max_steps=args.max_steps, grad_clip=args.grad_clip, seed=args.seed,
                       val_fraction=args.val_fraction, eval_batches=args.eval_batches,
                       eval_every=args.eval_every, log_every=args.log_every,
                       checkpoint_every=args.checkpoint_every, sample_every=args.sample_every)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, header, optimizer = checkpoint.load(_need_file(args.resume, "resume"),
                                                   lambda m: make_optimizer(m, tcfg))
        step = header["step"]
        log.info("resuming from %s at step %d (model config taken from the checkpoint)", args.resume, step)
    else:
        cfg = model_config(args)
        if args.match_params:
            if args.arch != "sam":
                raise UsageError("--match-params needs --arch sam")
            pam_cfg = ModelConfig.from_dict(json.loads(_need_file(args.match_params, "match-params").read_text()))
            cfg = match_sam_config(pam_cfg).replace(seed=args.seed)
            n_pam, n_sam = count_params(pam_cfg), count_params(cfg)
            print(f"PAM params {n_pam}  SAM params {n_sam}  (dim={cfg.dim} heads={cfg.n_heads})  "
                  f"gap {abs(n_sam - n_pam) / n_pam:.2%}")
        model, step, optimizer = PhaseLM(cfg), 0, None

    corpus = Corpus.from_file(corpus_path, args.val_fraction, model.cfg.vocab_size)
    trainer = Trainer(model, corpus, tcfg, step=step, optimizer=optimizer)
    print(f"{model.cfg.arithmetic} model, {model.num_parameters()} parameters, "
          f"{trainer.steps_per_epoch} steps/epoch, training to step {trainer.total_steps}")

    metrics = MetricsLog(out / "metrics.csv", {"seed": args.seed, "model": model.cfg.to_dict(),
                                               "settings": _settings(args)})
    scfg = sampler_config(args)
    samples = GenerationLog(out / "samples.txt", scfg, args.seed) if args.sample_every else None
    best = {"loss": math.inf}

    def save(name):
        checkpoint.save(out / name, trainer.model, trainer.step, trainer.optimizer,
                        rng={"seed": args.seed, "data_order": "numpy default_rng([seed, epoch])"},
                        extra={"train": tcfg.to_dict()})

    def on_step(tr, loss, grad_norm, lr):
        if args.checkpoint_every and tr.step % args.checkpoint_every == 0:
            save(f"ckpt-step{tr.step:07d}.bin")
        if samples is not None and tr.step % args.sample_every == 0:
            new = generate(tr.model, encode(args.sample_prompt), scfg, seed=args.seed + tr.step)
            samples.write(tr.step, args.sample_prompt, decode(new), repetition_metrics(new))
            tr.model.train()

    def on_eval(tr, vloss, vppl):
        print(f"step {tr.step:6d}  val loss {vloss:.4f}  ppl {vppl:.2f}")
        if vloss < best["loss"]:
            best["loss"] = vloss

    try:
        trainer.run(metrics=metrics, on_step=on_step, on_eval=on_eval)
    finally:
        metrics.close()
    save("final.bin")
    print(f"wrote {out / 'final.bin'} and {out / 'metrics.csv'}")
    return 0


def cmd_eval(args):
    model, _ = _load(args.checkpoint)
    corpus = Corpus.from_file(_need_file(args.corpus, "corpus"), args.val_fraction, model.cfg.vocab_size)
    loss, ppl = evaluate(model, corpus, args.split, args.seq_len, args.batch_size, args.max_batches)
    print(f"{args.split} loss {loss:.4f} nats  ppl {ppl:.2f}")
    if args.output:
        Path(args.output).write_text(json.dumps({"split": args.split, "loss_nats": loss, "ppl": ppl,
                                                 "checkpoint": str(args.checkpoint), "seed": args.seed},
                                                indent=2) + "\n")
    return 0


def cmd_generate(args):
    model, _ = _load(args.checkpoint)
    new = generate(model, encode(args.prompt), sampler_config(args, args.max_new), seed=args.seed)
    print(args.prompt + decode(new))
    if len(new) >= 4:
        m = repetition_metrics(new)
        print(f"rep3={m.rep3:.3f} rep4={m.rep4:.3f} unique={m.unique_ratio:.3f} seed={args.seed}")
    else:
        print(f"rep3=n/a rep4=n/a unique=n/a (only {len(new)} new tokens) seed={args.seed}")
    return 0


def cmd_verify(args):
    from .verify import run_suite

    dtype = torch.float64 if args.precision == "64" else torch.float32
    print(f"property suite, {args.precision}-bit, {args.seeds} dual-form seeds"
          + (f", decay fault {args.inject_fault:g}" if args.inject_fault else ""))
    results = run_suite(dtype, seeds=args.seeds, inject_fault=args.inject_fault)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 1 if failed else 0


def cmd_count_params(args):
    if args.sweep:
        for label, cfg in SWEEP_CONFIGS.items():
            n = count_params(cfg)
            print(f"{label:>5}  dim={cfg.dim:<4} layers={cfg.n_layers:<3} heads={cfg.n_heads:<2} "
                  f"head_dim={cfg.head_dim:<3} params={n:>11,}  vs nominal {n / NOMINAL_SCALE[label] - 1:+.1%}")
        return 0
    print(count_params(model_config(args)))
    return 0


def cmd_match_sam(args):
    rows = SWEEP_CONFIGS.items() if args.sweep else [("config", model_config(args).replace(arithmetic="complex"))]
    for label, cfg in rows:
        sam = match_sam_config(cfg, args.tolerance)
        n_pam, n_sam = count_params(cfg), count_params(sam)
        print(f"{label:>6}  PAM {n_pam:>11,}  SAM dim={sam.dim} heads={sam.n_heads} {n_sam:>11,}  "
              f"gap {abs(n_sam - n_pam) / n_pam:.2%}")
    return 0


def cmd_state_rank(args):
    if args.checkpoint:
        model, _ = _load(args.checkpoint)
    else:
        model = PhaseLM(model_config(args))
    if args.text:
        tokens = encode(_need_file(args.text, "text").read_text(encoding="utf-8"))[: args.length]
    else:
        tokens = np.random.default_rng(args.seed).integers(0, model.cfg.vocab_size, args.length).tolist()
    rows = state_rank_trace(model, tokens)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "layer", "head", "effective_rank"])
        w.writerows((p, l, h, f"{r:.6f}") for p, l, h, r in rows)
    last = max(r[0] for r in rows)
    d = model.cfg.head_dim
    for p, l, h, r in rows:
        if p == last:
            print(f"layer {l} head {h}: effective rank {r:.3f} of d = {d}")
    print(f"wrote {args.output} (seed {args.seed})")
    return 0


def cmd_phase(args):
    model, _ = _load(args.checkpoint)
    if not model.cfg.is_complex:
        raise UsageError("phase analysis needs a complex (PAM) checkpoint")
    pairs = analysis.read_pairs(_need_file(args.pairs, "pairs"), encode)
    report = analysis.phase_coherence(model.embed, pairs)
    analysis.write_pairs_csv(args.output, report.records)
    for label, s in sorted(report.by_label.items()):
        print(f"{label:<10} n={s['n']:<5} mean phase {s['mean_phase']:+.4f} rad  mean coherence {s['mean_coherence']:.4f}")
    print(f"skipped {report.skipped} pairs with a zero-norm embedding; wrote {args.output}")
    return 0


def cmd_decoherence(args):
    unit, conv = ("bits", analysis.to_bits) if args.bits else ("nats", lambda x: x)
    grid = np.round(np.linspace(0, 1, 11), 10) if args.grid else [args.example_p]
    for p in grid:
        rho = analysis.example_state(float(p))
        h, s = analysis.shannon_diag(rho), analysis.von_neumann(rho)
        print(f"p = {p:.2f}  H = {conv(h):.4f}, S_VN = {conv(s):.4f}, gap = {conv(h - s):.4f} {unit}")
    if (args.e_real is None) != (args.d_eff is None):
        raise UsageError("--e-real and --d-eff go together")
    if args.e_real is not None:
        print(f"floor bound: {conv(analysis.floor_bound(args.e_real, args.d_eff)):.4f} {unit}")
    return 0


def cmd_scaling(args):
    groups = analysis.read_scaling_csv(_need_file(args.input, "input"))
    report = analysis.scaling_report(groups, args.space)
    report["seed"] = args.seed
    text = json.dumps(report, indent=2)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "verify": cmd_verify,
    "count-params": cmd_count_params, "match-sam": cmd_match_sam,
    "state-rank": cmd_state_rank, "phase": cmd_phase, "decoherence": cmd_decoherence, "scaling": cmd_scaling,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = resolve(argv)
    except UsageError as exc:
        print(f"phasemem: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    torch.manual_seed(args.seed)
    name = args.analysis if args.command == "analyze" else args.command
    try:
        return COMMANDS[name](args)
    except (UsageError, PhaseMemError, ValueError, OSError) as exc:
        print(f"phasemem: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
