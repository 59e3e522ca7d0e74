"""Command-line surface: synth / train / edit / eval / demo.

Every command takes an optional --config JSON file (sections: dataset,
model, schedule, train, eval) with CLI flags overriding file values, writes
its effective config next to its outputs, and maintains a MANIFEST of
emitted files. Exit codes: 0 success, 1 usage or config error, 2 runtime
fault.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

import numpy as np
from PIL import Image

from . import diffusion as dif
from . import evalsuite, figures, fonts, synth
from .encoders import CharVocab
from .errors import ConfigError, SteditError
from .synth import SynthConfig, config_from_dict, config_to_dict
from .unet import ModelConfig

CONFIG_SECTIONS = ("dataset", "model", "schedule", "train", "eval")

DEFAULT_EVAL = {"ddim_steps": 25, "guidance": 1.0, "seed": 0, "batch": 32}
DEFAULT_SCHEDULE = {"T": 200, "beta_start": 1e-4, "beta_end": 0.02}


def load_config_file(path: str | None) -> dict:
    cfg = {s: {} for s in CONFIG_SECTIONS}
    if path is None:
        return cfg
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for s in CONFIG_SECTIONS:
        section = data.get(s, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {s!r} must be an object")
        cfg[s] = section
    return cfg


class OutputDir:
    """Output directory with a MANIFEST of emitted files."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files: list[str] = []

    def register(self, *names: str):
        self.files.extend(names)

    def write_json(self, name: str, payload: dict):
        with open(os.path.join(self.path, name), "w") as fh:
            json.dump(payload, fh, indent=1, default=str)
        self.register(name)

    def finalize(self):
        with open(os.path.join(self.path, "MANIFEST"), "w") as fh:
            for name in self.files:
                fh.write(name + "\n")


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise ConfigError(f"--size must look like 32x64 (HxW), got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _parse_weights(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4 or sum(parts) <= 0:
        raise ConfigError("--category-weights needs 4 comma-separated nonnegative "
                          "numbers with a positive sum")
    return tuple(parts)


def _dataset_config(args, file_cfg: dict) -> SynthConfig:
    d = dict(file_cfg.get("dataset", {}))
    if getattr(args, "size", None):
        d["height"], d["width"] = _parse_size(args.size)
    if getattr(args, "words", None):
        d["words"] = tuple(args.words.split(","))
    if getattr(args, "fonts", None):
        d["fonts"] = tuple(fonts.font_id_of(n) for n in args.fonts.split(","))
    if getattr(args, "colors", None):
        names = args.colors.split(",")
        for n in names:
            if n not in synth.PALETTE:
                raise ConfigError(f"unknown color {n!r}; palette: {', '.join(synth.PALETTE)}")
        d["colors"] = tuple(names)
    if getattr(args, "category_weights", None):
        d["category_weights"] = _parse_weights(args.category_weights)
    return config_from_dict(d)


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    file_cfg = load_config_file(args.config)
    cfg = _dataset_config(args, file_cfg)
    out = OutputDir(args.out)
    manifest = synth.emit_dataset(cfg, args.out, num=args.num, seed=args.seed)
    out.register("manifest.jsonl", "images/", "masks/", "masked/")
    out.write_json("effective_config.json",
                   {"dataset": config_to_dict(cfg), "num": args.num, "seed": args.seed})
    out.finalize()
    print(f"wrote {args.num} examples to {manifest}")
    return 0


# -- train ---------------------------------------------------------------------

def _vocabs_for_training(manifest_path: str):
    instr_vocab = evalsuite._train_instr_vocab(manifest_path)
    return CharVocab(), instr_vocab


def cmd_train(args) -> int:
    file_cfg = load_config_file(args.config)
    model_d = dict(file_cfg.get("model", {}))
    sched_d = {**DEFAULT_SCHEDULE, **file_cfg.get("schedule", {})}
    train_d = {**dif.TrainConfig().to_dict(), **file_cfg.get("train", {})}
    if args.steps is not None:
        train_d["steps"] = args.steps
    if args.batch is not None:
        train_d["batch"] = args.batch
    if args.lr is not None:
        train_d["lr"] = args.lr
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.T is not None:
        sched_d["T"] = args.T
    if args.ablate_char:
        model_d["char_branch_enabled"] = False
    model_cfg = ModelConfig.from_dict(model_d)
    train_cfg = dif.TrainConfig.from_dict(train_d)
    schedule = dif.make_schedule(**sched_d)
    out = OutputDir(args.out)
    start_step = 0
    resume_state = None
    if args.resume:
        model, schedule, blob, tensors = dif.load_checkpoint(args.resume)
        start_step = blob.get("step", 0)
        resume_state = tensors
        if blob["model"].get("char_branch_enabled") != model_cfg.char_branch_enabled:
            raise ConfigError("--ablate-char does not match the resumed checkpoint")
    else:
        char_vocab, instr_vocab = _vocabs_for_training(args.data)
        model = dif.build_model(model_cfg, char_vocab, instr_vocab, schedule,
                                seed=train_cfg.seed)
    print(f"training {'inst-only' if args.ablate_char else 'dual'} model: "
          f"{model.num_parameters()} parameters, {train_cfg.steps} steps")
    ckpt = dif.train(args.data, model, schedule, train_cfg, args.out,
                     resume_optimizer=resume_state, start_step=start_step)
    figures.save_loss_curve(os.path.join(args.out, "metrics.csv"),
                            os.path.join(args.out, "loss_curve.png"))
    out.register("model.dste", "metrics.csv", "loss_curve.png")
    out.write_json("effective_config.json", {
        "model": model_cfg.to_dict(), "schedule": sched_d,
        "train": train_cfg.to_dict(), "data": os.path.abspath(args.data),
    })
    out.finalize()
    print(f"checkpoint: {ckpt}")
    return 0


# -- edit ----------------------------------------------------------------------

def _instruction_target(instruction: str, text_flag: str | None) -> str:
    if text_flag:
        return text_flag
    m = re.search(r'"([^"]*)"', instruction)
    if not m:
        raise ConfigError(
            'cannot find the target text: quote it in the instruction '
            '(Write "word" ...) or pass --text')
    return m.group(1)


def _load_image_mask(image_path: str, mask_path: str):
    img = np.asarray(Image.open(image_path).convert("RGB"))
    mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.float32)
    if img.shape[:2] != mask.shape:
        raise ConfigError(f"image {img.shape[:2]} and mask {mask.shape} sizes differ")
    return img, mask


def _conditioning_for(model, img: np.ndarray, mask: np.ndarray,
                      instruction: str, target: str) -> dif.Conditioning:
    x0 = img.astype(np.float32).transpose(2, 0, 1)[None] / 127.5 - 1.0
    m = mask[None, None]
    return dif.Conditioning(
        instr_ids=model.instr_enc.vocab.tokenize(instruction)[None],
        char_ids=model.char_enc.vocab.tokenize(target)[None],
        mask=m,
        masked_image=x0 * (1.0 - m),
    )


def _sample_one(model, schedule, cond, steps, guidance, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = dif.ddim_sample(model, cond, schedule, steps=steps,
                          guidance_scale=guidance, rng=rng)
    return synth.to_uint8((out[0].transpose(1, 2, 0) + 1.0) / 2.0)


def cmd_edit(args) -> int:
    model, schedule, blob, _ = dif.load_checkpoint(args.ckpt)
    img, mask = _load_image_mask(args.image, args.mask)
    target = _instruction_target(args.instruction, args.text)
    cond = _conditioning_for(model, img, mask, args.instruction, target)
    result = _sample_one(model, schedule, cond, args.steps, args.guidance, args.seed)
    out = OutputDir(args.out)
    Image.fromarray(result).save(os.path.join(args.out, "edit.png"))
    out.register("edit.png")
    out.write_json("effective_config.json", {
        "ckpt": os.path.abspath(args.ckpt), "instruction": args.instruction,
        "target": target, "steps": args.steps, "guidance": args.guidance,
        "seed": args.seed,
    })
    out.finalize()
    print(os.path.join(args.out, "edit.png"))
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    file_cfg = load_config_file(args.config)
    eval_d = {**DEFAULT_EVAL, **file_cfg.get("eval", {})}
    unknown = set(eval_d) - set(DEFAULT_EVAL)
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    if args.steps is not None:
        eval_d["ddim_steps"] = args.steps
    if args.seed is not None:
        eval_d["seed"] = args.seed
    model, schedule, blob, _ = dif.load_checkpoint(args.ckpt)
    images, records = evalsuite.generate_edits(
        model, schedule, args.data, ddim_steps=eval_d["ddim_steps"],
        guidance_scale=eval_d["guidance"], seed=eval_d["seed"],
        batch_size=eval_d["batch"])
    index = evalsuite.index_for_manifests(args.data)
    report = evalsuite.evaluate_images(images, records, index)
    report_path = args.report
    out = OutputDir(os.path.dirname(os.path.abspath(report_path)) or ".")
    report.save(report_path)
    out.register(os.path.basename(report_path))
    base = os.path.splitext(report_path)[0]
    csv_path = base + "_records.csv"
    _write_records_csv(report, csv_path)
    out.register(os.path.basename(csv_path))
    grid_path = base + "_grid.png"
    for rec, entry in zip(records, report.records):
        gt, mask = synth.load_example_images(args.data, rec)
        rec["_gt"] = gt
        rec["_masked"] = gt * (1 - mask[..., None])
        rec["_pred"] = entry["predicted"]
    figures.save_eval_grid(images, records, grid_path)
    out.register(os.path.basename(grid_path))
    out.write_json("eval_effective_config.json", {
        "ckpt": os.path.abspath(args.ckpt), "data": os.path.abspath(args.data),
        "metrics": args.metrics, **eval_d,
    })
    out.finalize()
    shown = {k: v for k, v in report.to_dict().items() if k != "records"}
    print(json.dumps(shown))
    return 0


def _write_records_csv(report, path: str):
    import csv as _csv

    cols = ["id", "target", "predicted", "score", "color_ok", "color_dist", "font_ok"]
    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for rec in report.records:
            writer.writerow(rec)


# -- demo ---------------------------------------------------------------------

def _demo_scene(model_blob: dict, seed: int, word: str, config_d: dict | None):
    cfg = config_from_dict(config_d or model_blob.get("dataset", {}) or {})
    last = None
    for attempt in range(10):
        rng = np.random.default_rng([seed, attempt])
        try:
            spec, img, _ = synth.compose_scene(rng, cfg, "style_free",
                                               scene_words=[word], seed=seed)
        except synth.CapacityError as err:
            last = err
            continue
        mask = synth.augment_mask(spec, rng, max_stretch=1.0)
        return synth.to_uint8(img), mask.astype(np.float32)
    raise last


def cmd_demo(args) -> int:
    file_cfg = load_config_file(args.config)
    model, schedule, blob, _ = dif.load_checkpoint(args.ckpt)
    out = OutputDir(args.out)
    seed = args.seed
    word = args.text or "apple"
    img, mask = _demo_scene(blob, seed, word, file_cfg.get("dataset") or None)
    steps, guidance = args.steps, args.guidance

    def sample(instruction: str, target: str, s: int) -> np.ndarray:
        cond = _conditioning_for(model, img, mask, instruction, target)
        return _sample_one(model, schedule, cond, steps, guidance, s)

    masked_img = synth.to_uint8(img / 255.0 * (1 - mask[..., None]))
    if args.mode == "grid":
        samples = [sample(f'Write "{word}"', word, seed + i) for i in range(4)]
        figures.save_image_grid([[img, masked_img] + samples],
                                os.path.join(args.out, "grid.png"),
                                col_titles=["input", "masked"] +
                                [f"sample {i}" for i in range(4)])
        out.register("grid.png")
    elif args.mode == "extrapolate":
        formats = ["", "Bold", "Italic", "BoldItalic"]
        rows = []
        for base in fonts.FONT_NAMES:
            row = []
            for fmt in formats:
                label = f"{base}-{fmt}" if fmt else base
                row.append(sample(f'Write "{word}" in font: {label}', word, seed))
            rows.append(row)
        figures.save_image_grid(rows, os.path.join(args.out, "extrapolate.png"),
                                col_titles=["plain"] + formats[1:],
                                row_titles=list(fonts.FONT_NAMES))
        out.register("extrapolate.png")
    elif args.mode == "interpolate":
        pair = (args.font_pair or "Sans,Serif").split(",")
        if len(pair) != 2:
            raise ConfigError("--font-pair needs two comma-separated font names")
        instruction = f'Write "{word}" in font: {pair[0]} and {pair[1]}'
        row = [sample(f'Write "{word}" in font: {pair[0]}', word, seed),
               sample(instruction, word, seed),
               sample(f'Write "{word}" in font: {pair[1]}', word, seed)]
        figures.save_image_grid([row], os.path.join(args.out, "interpolate.png"),
                                col_titles=[pair[0], "mix", pair[1]])
        out.register("interpolate.png")
    elif args.mode == "freeform":
        instruction = args.instruction or f'a word spelled "{word}" in a dark color'
        target = _instruction_target(instruction, args.text)
        result = sample(instruction, target, seed)
        figures.save_image_grid([[img, masked_img, result]],
                                os.path.join(args.out, "freeform.png"),
                                col_titles=["input", "masked", "generated"])
        out.register("freeform.png")
    out.write_json("effective_config.json", {
        "mode": args.mode, "ckpt": os.path.abspath(args.ckpt), "seed": seed,
        "steps": steps, "guidance": guidance, "word": word,
    })
    out.finalize()
    print(args.out)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stedit",
                                description="Diffusion scene-text editing at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", help="HxW, e.g. 32x64")
    sp.add_argument("--category-weights", dest="category_weights",
                    help="4 comma-separated weights (style_free,color_only,font_only,full)")
    sp.add_argument("--words", help="comma-separated word list")
    sp.add_argument("--fonts", help="comma-separated font names")
    sp.add_argument("--colors", help="comma-separated palette color names")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a denoiser on a dataset manifest")
    tp.add_argument("--data", required=True, help="path to manifest.jsonl")
    tp.add_argument("--out", required=True)
    tp.add_argument("--steps", type=int)
    tp.add_argument("--batch", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--T", type=int)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--ablate-char", dest="ablate_char", action="store_true",
                    help="disable the character branch (instruction-only arm)")
    tp.add_argument("--resume", help="checkpoint to resume from")
    tp.add_argument("--config")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("edit", help="inpaint one masked region per an instruction")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--image", required=True)
    ep.add_argument("--mask", required=True)
    ep.add_argument("--instruction", required=True)
    ep.add_argument("--text", help="target text override (default: quoted text)")
    ep.add_argument("--steps", type=int, default=50)
    ep.add_argument("--guidance", type=float, default=1.0)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_edit)

    vp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    vp.add_argument("--ckpt", required=True)
    vp.add_argument("--data", required=True)
    vp.add_argument("--metrics", default="ocr,color,font")
    vp.add_argument("--report", required=True, help="output report JSON path")
    vp.add_argument("--steps", type=int)
    vp.add_argument("--seed", type=int)
    vp.add_argument("--config")
    vp.set_defaults(func=cmd_eval)

    dp = sub.add_parser("demo", help="qualitative demos (no quality assertions)")
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--mode", choices=["grid", "extrapolate", "interpolate", "freeform"],
                    required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--text")
    dp.add_argument("--instruction", help="freeform instruction text")
    dp.add_argument("--font-pair", dest="font_pair", help="interpolate: Font1,Font2")
    dp.add_argument("--steps", type=int, default=50)
    dp.add_argument("--guidance", type=float, default=1.0)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--config")
    dp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; remap per our contract
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (SteditError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
