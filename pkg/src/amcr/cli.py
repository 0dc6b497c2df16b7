"""Command-line entry point: ``amcr <subcommand> [flags]``.

Exit codes: 0 success / clean, 1 infringement detected (``detect`` only),
2 usage or input-validation error, 3 provider or runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from . import io as aio
from .attention import build_soft_mask, export_mask
from .backends import (
    DeterministicTestEncoder,
    LinearPatchEncoder,
    RemoteSlotProvider,
    RemoteTextEncoder,
    StaticCandidateTable,
    TextEncoder,
    fixture_vocabulary,
    load_vocabulary,
)
from .calibration import calibrate, load_pairs
from .config import KNOBS, env_name, load_config, parse_pi, parse_steps
from .detector import detect
from .diffusion import Conditioning, NoiseStream, ZeroPredictor, make_schedule, reference_trajectory, trajectory
from .errors import AmcrError, ContractViolation, ValidationError
from .mitigator import MitigationConfig, finetune
from .risk import load_corpus, rank_slots
from .sanitizer import SanitizerConfig, sanitize
from .slots import parse_prompt, parse_with_provider

log = logging.getLogger("amcr")

EXIT_OK, EXIT_INFRINGED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _knob_flags(p: argparse.ArgumentParser, keys: Sequence[str], aliases: dict[str, str]) -> None:
    g = p.add_argument_group("configuration (flag > env > --config file > default)")
    for key in keys:
        knob = KNOBS[key]
        names = ["--" + key.replace("_", "-")] + ([aliases[key]] if key in aliases else [])
        g.add_argument(
            *names,
            dest=key,
            type=knob.type,
            default=None,
            help=f"{knob.help} [env {env_name(key)}, default {knob.default!r}]",
        )


ENCODER_KEYS = ("seed", "encoder_dim", "vocab", "embed_endpoint", "embed_timeout", "embed_token")
SANITIZER_KEYS = ("lam", "budget", "gamma", "window_m", "risk_quantile", "candidates_per_element", "slot_endpoint")
DETECTOR_KEYS = ("beta", "tau", "rule", "pi")
SCHEDULE_KEYS = ("schedule_t", "schedule_family", "timesteps", "seed")
MITIGATOR_KEYS = ("lambda_r", "lambda_a", "beta", "pi", "w_preserve", "w_risk", "w_align", "lr", "iters", "seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amcr", description="Copyright-risk tooling for text-to-image prompts and latents.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help_: str, keys: Sequence[str], aliases: dict[str, str] | None = None) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="write the report here instead of standard output")
        _knob_flags(p, list(dict.fromkeys(keys)), aliases or {})
        return p

    p = add(
        "sanitize",
        "rewrite a prompt to lower its copyright risk",
        ENCODER_KEYS + SANITIZER_KEYS,
        {"lam": "--lambda", "window_m": "--window", "risk_quantile": "--quantile"},
    )
    p.add_argument("--prompt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", help="candidate table JSON (defaults to the shipped table)")

    p = add("score", "per-slot risk report for a prompt", ENCODER_KEYS + ("slot_endpoint",))
    p.add_argument("--prompt", required=True)
    p.add_argument("--corpus", required=True)

    p = add("mask", "soft masks from a cross-attention container", ())
    p.add_argument("--attention", "--attn", dest="attention", required=True)
    p.add_argument("--layer-weights", help="comma-separated per-layer weights")
    p.add_argument("--tokens", help="comma-separated token indices (default: all)")
    p.add_argument("--png-dir", help="also export one PNG per step here")

    p = add("trajectory", "aligned clean-estimate trajectories for generated / reference latents", SCHEDULE_KEYS, {"timesteps": "--steps"})
    p.add_argument("--ref", required=True, help="reference latent container")
    p.add_argument("--gen", help="generated latent container (defaults to the reference)")
    p.add_argument("--predictor", help="toy predictor container (default: zero predictor)")
    p.add_argument("--patch", type=int, default=2)
    p.add_argument("--patch-dim", type=int, default=32)

    p = add("detect", "partial-infringement score over aligned trajectories", DETECTOR_KEYS)
    p.add_argument("--gen", required=True, help="generated patch container")
    p.add_argument("--ref", required=True, help="reference patch container")
    p.add_argument("--masks", required=True, help="mask container")

    p = add("mitigate", "toy fine-tuning against an infringing reference", MITIGATOR_KEYS, {"iters": "--steps"})
    p.add_argument("--bundle", "--fixtures", dest="bundle", required=True, help="fixture bundle directory")
    p.add_argument("--save-predictor", help="write the tuned predictor container here")

    p = add("calibrate", "choose tau from labeled score pairs", ("operating_point",))
    p.add_argument("--pairs", required=True, help="JSON lines of {score, label}")
    return parser


# -- helpers -----------------------------------------------------------------

def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _encoder(cfg: dict[str, Any]) -> TextEncoder:
    if cfg["embed_endpoint"]:
        return RemoteTextEncoder(
            cfg["embed_endpoint"], cfg["encoder_dim"], cfg["embed_timeout"], token=cfg["embed_token"] or None
        )
    vocab = load_vocabulary(cfg["vocab"]) if cfg["vocab"] else fixture_vocabulary()
    return DeterministicTestEncoder.from_vocabulary(vocab, seed=cfg["seed"], dim=cfg["encoder_dim"])


def _structure(prompt: str, cfg: dict[str, Any]):
    if cfg["slot_endpoint"]:
        provider = RemoteSlotProvider(cfg["slot_endpoint"], cfg["embed_timeout"], cfg["embed_token"] or None)
        return parse_with_provider(prompt, provider)
    return parse_prompt(prompt)


def _floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise ValidationError(f"bad number list {text!r}") from exc


# -- subcommands -------------------------------------------------------------

def cmd_sanitize(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    encoder = _encoder(cfg)
    corpus = load_corpus(args.corpus, encoder)
    scfg = SanitizerConfig(
        cfg["lam"], cfg["budget"], cfg["gamma"], cfg["window_m"], cfg["risk_quantile"], cfg["candidates_per_element"]
    )
    table = (
        StaticCandidateTable(json.loads(Path(args.candidates).read_text(encoding="utf-8")))
        if args.candidates
        else StaticCandidateTable.default()
    )
    result = sanitize(_structure(args.prompt, cfg), corpus, encoder, scfg, provider=table)
    _emit(aio.dumps_report(result), args.out)
    return EXIT_OK


def cmd_score(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    encoder = _encoder(cfg)
    corpus = load_corpus(args.corpus, encoder)
    _emit(aio.dumps_report(rank_slots(_structure(args.prompt, cfg), corpus, encoder)), args.out)
    return EXIT_OK


def cmd_mask(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    stacks = aio.load_attention(args.attention)
    weights = _floats(args.layer_weights)
    tokens = [int(x) for x in _floats(args.tokens)] if args.tokens else None
    masks = {s.step: build_soft_mask(s, weights, tokens) for s in stacks}
    if args.png_dir:
        Path(args.png_dir).mkdir(parents=True, exist_ok=True)
        for t, m in masks.items():
            export_mask(m, Path(args.png_dir) / f"mask_t{t:03d}.png")
    if args.out and args.out.lower().endswith(".png"):
        out = Path(args.out)
        for t, m in masks.items():
            # one step keeps the exact name; several get a step suffix
            export_mask(m, out if len(masks) == 1 else out.with_name(f"{out.stem}_t{t:03d}.png"))
    elif args.out:
        aio.save_masks(args.out, masks)
    summary = {
        "steps": {str(t): {"grid": list(m.field.shape), "mean": float(m.field.mean())} for t, m in masks.items()},
        "token_labels": list(stacks[0].token_labels) if stacks else [],
    }
    sys.stdout.write(aio.canonical_json(summary) + "\n")
    return EXIT_OK


def cmd_trajectory(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    if not args.out:
        raise ValidationError("trajectory needs --out <directory>")
    sched = make_schedule(cfg["schedule_t"], cfg["schedule_family"])
    steps = parse_steps(cfg["timesteps"])
    ref = next(iter(aio.load_latents(args.ref).values()))
    gen = next(iter(aio.load_latents(args.gen).values())) if args.gen else ref
    if gen.shape != ref.shape:
        raise ValidationError(f"generated {gen.shape} and reference {ref.shape} latents differ in shape")
    predictor = aio.load_predictor(args.predictor) if args.predictor else ZeroPredictor()
    noise = NoiseStream(cfg["seed"], ref.shape)
    cond = Conditioning.prompt(np.zeros((1, 1)))
    gen_traj = dict(trajectory(gen, sched, predictor, cond, steps, noise))
    ref_traj = dict(reference_trajectory(ref, sched, predictor, steps, noise))
    enc = LinearPatchEncoder(patch=args.patch, dim=args.patch_dim, channels=ref.shape[0], seed=cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aio.save_latents(out / "gen_traj.amcr", gen_traj)
    aio.save_latents(out / "ref_traj.amcr", ref_traj)
    aio.save_patches(out / "gen_patches.amcr", {t: enc.embed_patches(z) for t, z in gen_traj.items()})
    aio.save_patches(out / "ref_patches.amcr", {t: enc.embed_patches(z) for t, z in ref_traj.items()})
    summary = {"steps": steps, "schedule": sched.family, "T": sched.T, "seed": cfg["seed"], "patch_encoder": enc.id}
    sys.stdout.write(aio.canonical_json(summary) + "\n")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    gen = aio.load_patches(args.gen, "generated")
    ref = aio.load_patches(args.ref, "reference")
    masks = aio.load_masks(args.masks)
    missing = set(gen) - set(masks)
    if missing:
        raise ValidationError(f"no mask for steps {sorted(missing)}")
    report = detect(
        {t: (p, masks[t]) for t, p in gen.items()}, ref, cfg["tau"], parse_pi(cfg["pi"]), cfg["beta"], cfg["rule"]
    )
    _emit(aio.dumps_report(report), args.out)
    return EXIT_INFRINGED if report.infringed else EXIT_OK


def cmd_mitigate(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    bundle = aio.ingest_fixture_bundle(args.bundle)
    mcfg = MitigationConfig(
        cfg["lambda_r"], cfg["lambda_a"], cfg["beta"], parse_pi(cfg["pi"]), cfg["w_preserve"], cfg["w_risk"], cfg["w_align"]
    )
    pe = bundle.patch_encoder()
    prompt = bundle.manifest.get("mitigation_prompt", "")
    embedding = DeterministicTestEncoder(cfg["seed"], dim=pe.dim).embed_one(prompt)
    fx = bundle.mitigation_fixture(embedding)
    final, history = finetune(fx.base, fx, mcfg, cfg["iters"], cfg["lr"])
    lines = [
        aio.canonical_json(
            {"iter": i, "l_preserve": r.l_preserve, "l_risk": r.l_risk, "l_align": r.l_align, "l_total": r.l_total}
        )
        for i, r in enumerate(history)
    ]
    _emit("\n".join(lines) + "\n", args.out)
    if args.save_predictor:
        aio.save_predictor(args.save_predictor, final)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    result = calibrate(load_pairs(args.pairs), cfg["operating_point"])
    _emit(aio.canonical_json(result.to_dict()) + "\n", args.out)
    return EXIT_OK


COMMANDS = {
    "sanitize": cmd_sanitize,
    "score": cmd_score,
    "mask": cmd_mask,
    "trajectory": cmd_trajectory,
    "detect": cmd_detect,
    "mitigate": cmd_mitigate,
    "calibrate": cmd_calibrate,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {k: getattr(args, k) for k in KNOBS if hasattr(args, k)}
        cfg = load_config(flags, args.config)
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, ContractViolation, FileNotFoundError) as exc:
        print(f"amcr {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AmcrError, OSError) as exc:
        print(f"amcr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # never let a traceback escape
        log.debug("unexpected failure", exc_info=True)
        print(f"amcr {args.command}: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
