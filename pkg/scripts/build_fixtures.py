"""Regenerate everything under fixtures/ deterministically.

    python3 scripts/build_fixtures.py [--out fixtures]
"""

from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

import numpy as np

from amcr import io as aio
from amcr.attention import SoftMask, build_soft_mask
from amcr.detector import PatchEmbeddings
from amcr.synth import attention_stack, mitigation_fixture, region_mask

SEED = 0
STEPS = (3, 5, 8)
MITIGATION_PROMPT = "plumber fixing a sink in a kitchen"

CORPUS = [
    ("mario", "character"),
    ("super mario", "character"),
    ("mario's red cap", "character-attribute"),
    ("red cap and blue overalls", "character-attribute"),
    ("italian plumber", "character-attribute"),
    ("apple logo", "trademark"),
    ("bitten apple", "trademark"),
    ("apple inc", "trademark"),
]

PROMPTS = [
    {
        "prompt": "A cheerful plumber fixing a sink, red cap, blue overalls, photo.",
        "flagged": ["cheerful plumber", "red cap", "blue overalls"],
    },
    {
        "prompt": "A minimal bitten apple logo with a single leaf at an angled corner, flat design.",
        "flagged": ["bitten apple logo", "single leaf"],
    },
    {
        "prompt": "A plumber wearing blue overalls and a red cap fixing a sink in the kitchen, photographic style, close-up shot.",
        "flagged": ["red cap", "blue overalls"],
    },
]

# Three slots on private axes so the loop can be replayed by hand.
THREE_SLOT = {
    "prompt": "A tiger wearing a striped scarf in a jungle",
    "vocab": {
        "axes": ["feline", "cat", "stripes", "scarf", "plain", "pattern", "forest", "wood", "mascot", "film"],
        "phrases": {
            "tony the tiger": {"feline": 0.9, "mascot": 0.6},
            "striped tiger scarf": {"stripes": 0.8, "scarf": 0.5, "feline": 0.3},
            "jungle book": {"forest": 0.8, "film": 0.6},
            "tiger": {"feline": 0.95, "cat": 0.3},
            "striped scarf": {"stripes": 0.7, "scarf": 0.7},
            "jungle": {"forest": 0.9, "wood": 0.4},
            "big cat": {"cat": 0.8, "feline": 0.5},
            "house cat": {"cat": 1.0},
            "plain scarf": {"scarf": 0.9, "plain": 0.4},
            "patterned scarf": {"scarf": 0.7, "pattern": 0.6, "stripes": 0.3},
            "forest": {"wood": 0.9, "forest": 0.45},
            "woodland": {"wood": 1.0},
        },
    },
    "corpus": ["tony the tiger", "striped tiger scarf", "jungle book"],
    "candidates": {
        "subject": {"tiger": ["big cat", "house cat"]},
        "clothing": {"striped scarf": ["patterned scarf", "plain scarf"]},
        "scene": {"jungle": ["forest", "woodland"]},
    },
    "config": {"lam": 0.5, "budget": 5, "gamma": 0.02, "window_m": 3, "risk_quantile": 0.5, "candidates_per_element": 4},
}

CALIBRATION_PAIRS = [
    (0.41, 0), (0.55, 0), (0.62, 0), (0.71, 1), (0.74, 0),
    (0.78, 1), (0.83, 1), (0.86, 0), (0.91, 1), (0.95, 1),
]


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_corpus(path: Path, entries) -> None:
    lines = ["# phrase corpus for the shipped fixtures (one JSON object per line)"]
    for phrase, tag in entries:
        rec = {"phrase": phrase} if tag is None else {"phrase": phrase, "tag": tag}
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_plumber(root: Path) -> None:
    root.mkdir(parents=True)
    fx = mitigation_fixture(SEED, STEPS)
    rng = np.random.default_rng(SEED + 1)
    focus = region_mask((8, 8), slice(0, 4), slice(0, 4))
    stacks = [attention_stack(rng, focus, step=t) for t in STEPS]
    masks = {t: build_soft_mask(s) for t, s in zip(STEPS, stacks)}
    # the bundle ships its own masks; rebuild the fixture on them so that
    # ingesting the bundle reproduces exactly what was saved
    fx.masks = masks
    gen_patches = {}
    for t in STEPS:
        z_hat = fx.clean_estimate(fx.base, t)
        gen_patches[t] = PatchEmbeddings(fx.encoder.forward(z_hat)[0], fx.encoder.grid(z_hat.shape))
    aio.save_latents(root / "latent_gen.amcr", {0: fx.gen_latent})
    aio.save_latents(root / "latent_ref.amcr", {0: fx.ref_latent})
    aio.save_attention(root / "attention.amcr", stacks)
    aio.save_masks(root / "masks.amcr", masks)
    aio.save_patches(root / "patches_gen.amcr", gen_patches)
    aio.save_patches(root / "patches_ref.amcr", fx.ref_patches)
    aio.save_predictor(root / "predictor.amcr", fx.base)
    records = []
    for smp in fx.batch:
        records += [(len(records), smp.z0), (len(records) + 1, smp.eps)]
    aio.write_container(root / "preserve.amcr", "LATN", records, {"t": [s.t for s in fx.batch]})
    write_json(root / "prompts.json", PROMPTS)
    write_json(
        root / "manifest.json",
        {
            "name": "plumber",
            "seed": SEED,
            "schedule": {"T": fx.sched.T, "family": fx.sched.family},
            "steps": list(STEPS),
            "patch_encoder": {"patch": 2, "dim": 32, "channels": 1, "seed": SEED},
            "mitigation_prompt": MITIGATION_PROMPT,
            "files": {"corpus": "../corpus.jsonl"},
        },
    )


def build_selfcheck(root: Path) -> None:
    """Identical generated and reference patches with one-hot masks."""
    root.mkdir(parents=True)
    rng = np.random.default_rng(SEED + 2)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    vectors = q[:, :4].T.copy()  # four orthonormal patch rows on a 2x2 grid
    patches = {t: PatchEmbeddings(vectors, (2, 2)) for t in STEPS}
    masks = {}
    for i, t in enumerate(STEPS):
        m = np.zeros((2, 2))
        m.flat[i % 4] = 1.0
        masks[t] = SoftMask(m, t)
    aio.save_patches(root / "patches_gen.amcr", patches)
    aio.save_patches(root / "patches_ref.amcr", patches)
    aio.save_masks(root / "masks.amcr", masks)
    write_json(root / "manifest.json", {"name": "selfcheck", "seed": SEED, "steps": list(STEPS)})


def build_three_slot(root: Path) -> None:
    root.mkdir(parents=True)
    write_json(root / "prompt.json", {"prompt": THREE_SLOT["prompt"], "config": THREE_SLOT["config"]})
    write_json(root / "vocab.json", THREE_SLOT["vocab"])
    write_json(root / "candidates.json", THREE_SLOT["candidates"])
    write_corpus(root / "corpus.jsonl", [(p, None) for p in THREE_SLOT["corpus"]])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "fixtures"))
    out = Path(ap.parse_args().out)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    write_corpus(out / "corpus.jsonl", CORPUS)
    build_plumber(out / "plumber")
    build_selfcheck(out / "selfcheck")
    build_three_slot(out / "sanitizer_3slot")
    stack = attention_stack(np.random.default_rng(SEED + 3), region_mask((8, 8), slice(2, 6), slice(4, 8)), step=0)
    aio.save_attention(out / "attention_2l2h.amcr", [stack])
    pairs = "\n".join(json.dumps({"score": s, "label": bool(y)}) for s, y in CALIBRATION_PAIRS)
    (out / "calibration_pairs.jsonl").write_text(pairs + "\n", encoding="utf-8")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
