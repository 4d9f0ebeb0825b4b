"""``attendgan`` command line: synth, pretrain-gen, pretrain-disc, adversarial, sample, evaluate.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import data as D
from . import discriminator as disc
from . import generator as gen
from . import trainer as T
from .config import ConfigError, RunConfig
from .metrics import evaluate_corpus

log = logging.getLogger("attendgan")

EXIT_USAGE, EXIT_FAILURE = 2, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _run_config(args, base: dict | None = None) -> RunConfig:
    """Layering: upstream checkpoint echo < --config file < --set / --seed."""
    obj = {k: v for k, v in (base or {}).items() if k in RunConfig.keys()}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            file_obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(file_obj, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        obj.update(file_obj)
    obj.update(_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    return RunConfig.from_dict(obj)


def _need_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


def _load_vocab(c: ck.Checkpoint) -> D.Vocabulary:
    return D.Vocabulary.from_list(c.vocab)


def _encode(dataset, vocab, cfg: RunConfig, style, split) -> D.EncodedSet:
    return D.encode_pairs(dataset.pairs(style=style, split=split), vocab, cfg.seq_len)


def _val_set(dataset, vocab, cfg, style):
    enc = _encode(dataset, vocab, cfg, style, "val")
    if len(enc) == 0:
        raise D.DatasetError(f"no {style} validation captions in the dataset")
    return T.ValSet.from_encoded(enc)


def _write_log(tlog: T.TrainLog, path: Path):
    tlog.write_csv(path)
    log.info("wrote %s", path)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    styles = D.STYLES if args.style == "all" else (args.style,)
    lexicon = D.StyleLexicon.load(args.lexicon) if args.lexicon else D.default_lexicon()
    plan = D.CorpusPlan.uniform(args.scenes, styles)
    dataset = D.synth_corpus(plan, D.SynthConfig(), lexicon, seed=args.seed)
    D.dump_jsonl(dataset, args.out)
    if args.lexicon_out:
        lexicon.save(args.lexicon_out)
    log.info("wrote %d images to %s", len(dataset), args.out)
    return 0


def cmd_pretrain_gen(args) -> int:
    _need_files(args.data)
    cfg = _run_config(args)
    dataset = D.load_jsonl(args.data)
    vocab = D.build_vocab(dataset.all_tokens())
    train = _encode(dataset, vocab, cfg, "factual", "train")
    if len(train) == 0:
        raise D.DatasetError("no factual training captions in the dataset")
    val = _val_set(dataset, vocab, cfg, "factual")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config()
    params = gen.init_generator(cfg.generator_config(len(vocab), train.features.shape[2]), cfg.seed)
    res = T.pretrain_generator(train, val, tc, params)
    c = ck.Checkpoint(config=cfg.to_dict(), vocab=vocab.to_list())
    ck.put_params(c, "gen", res.params)
    ck.put_adam(c, "gen_opt", res.opt_state, res.params.names())
    c.state.update({"stage": "pretrain_gen", "val_scores": res.val_scores, "best_epoch": res.best_epoch,
                    "rng": {"scheme": "counter", "seed": cfg.seed}, "log": res.log.rows})
    ck.save_checkpoint(c, out / "generator.ckpt")
    _write_log(res.log, out / "pretrain_gen_log.csv")
    print(json.dumps({"checkpoint": str(out / "generator.ckpt"), "best_epoch": res.best_epoch,
                      cfg.val_metric: res.val_scores[res.best_epoch] if res.val_scores else None}))
    return 0


def cmd_pretrain_disc(args) -> int:
    _need_files(args.data, args.gen_checkpoint)
    gck = ck.load_checkpoint(args.gen_checkpoint)
    cfg = _run_config(args, gck.config)
    vocab = _load_vocab(gck)
    dataset = D.load_jsonl(args.data)
    real = _encode(dataset, vocab, cfg, cfg.critic_pretrain_style, "train")
    if len(real) == 0:
        raise D.DatasetError(f"no {cfg.critic_pretrain_style} training captions in the dataset")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gp = ck.get_params(gck, "gen")
    dp = disc.init_critic(cfg.critic_config(len(vocab)), cfg.seed)
    dp, tlog, opt = T.pretrain_discriminator(gp, real, cfg.train_config(), dp)
    c = ck.Checkpoint(config=cfg.to_dict(), vocab=vocab.to_list())
    ck.put_params(c, "disc", dp)
    ck.put_rmsprop(c, "disc_opt", opt, dp.names())
    c.state.update({"stage": "pretrain_disc", "rng": {"scheme": "counter", "seed": cfg.seed}, "log": tlog.rows})
    ck.save_checkpoint(c, out / "discriminator.ckpt")
    _write_log(tlog, out / "pretrain_disc_log.csv")
    last = tlog.rows[-1] if tlog.rows else {}
    print(json.dumps({"checkpoint": str(out / "discriminator.ckpt"),
                      "mean_real": last.get("mean_real"), "mean_fake": last.get("mean_fake")}))
    return 0


def cmd_adversarial(args) -> int:
    _need_files(args.data, args.gen_checkpoint, args.disc_checkpoint, args.resume)
    gck = ck.load_checkpoint(args.gen_checkpoint)
    cfg = _run_config(args, gck.config)
    vocab = _load_vocab(gck)
    dataset = D.load_jsonl(args.data)
    train = _encode(dataset, vocab, cfg, cfg.style, "train")
    if len(train) == 0:
        raise D.DatasetError(f"no {cfg.style} training captions in the dataset")
    val = _val_set(dataset, vocab, cfg, cfg.style)
    tc = cfg.train_config()
    if args.resume:
        state = T.adversarial_from_checkpoint(ck.load_checkpoint(args.resume))
    else:
        dck = ck.load_checkpoint(args.disc_checkpoint)
        if dck.vocab != gck.vocab:
            raise ck.CheckpointError("generator and critic checkpoints use different vocabularies")
        state = T.start_adversarial(ck.get_params(gck, "gen"), ck.get_params(dck, "disc"), tc)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def save_epoch(st):
        ck.save_checkpoint(T.adversarial_checkpoint(st, cfg.to_dict(), vocab.to_list()),
                           out / f"adversarial-epoch{st.epoch:03d}.ckpt")

    state = T.adversarial_train(train, val, state, tc, on_epoch=save_epoch, epochs=args.epochs)
    ck.save_checkpoint(T.adversarial_checkpoint(state, cfg.to_dict(), vocab.to_list()), out / "adversarial.ckpt")
    _write_log(state.log, out / "adversarial_log.csv")
    print(json.dumps({"checkpoint": str(out / "adversarial.ckpt"), "best_epoch": state.best_epoch,
                      "val_scores": state.val_scores}))
    return 0


def _sampling_params(c: ck.Checkpoint):
    for prefix in ("best", "gen"):
        if ck.has_params(c, prefix):
            return ck.get_params(c, prefix)
    raise ck.CheckpointError("checkpoint holds no generator parameters")


def cmd_sample(args) -> int:
    _need_files(args.checkpoint, args.data)
    c = ck.load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict({k: v for k, v in c.config.items() if k in RunConfig.keys()})
    vocab = _load_vocab(c)
    params = _sampling_params(c)
    dataset = D.load_jsonl(args.data).subset(style=args.style, split=args.split)
    if len(dataset) == 0:
        raise D.DatasetError(f"no images match split={args.split} style={args.style}")
    feats, ids = D.encode_images(dataset)
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 0x5A])
    batch = gen.sample(feats, params, args.mode, cfg.max_len, rng=rng if args.mode == "multinomial" else None)
    with open(args.out, "w") as fh:
        for image_id, toks in zip(ids, batch.tokens):
            words = vocab.decode(toks)
            fh.write(json.dumps({"image_id": image_id, "tokens": words, "caption": " ".join(words)}) + "\n")
    log.info("wrote %d captions to %s", len(ids), args.out)
    return 0


def _read_candidates(path) -> dict:
    """Sample files hold ``{image_id, tokens}``; dataset files contribute
    each image's first caption."""
    out = {}
    with open(path) as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is None:
        raise D.DatasetError(f"{path}: no candidates")
    if "captions" in json.loads(first):
        for img in D.load_jsonl(path).images:
            if img.captions:
                out[img.image_id] = list(img.captions[0].tokens)
        return out
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["image_id"])] = [str(t) for t in rec["tokens"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise D.DatasetError(f"{path} line {lineno}: malformed candidate ({exc})") from None
    return out


def cmd_evaluate(args) -> int:
    _need_files(args.candidates, args.references, args.lexicon)
    lexicon = D.StyleLexicon.load(args.lexicon) if args.lexicon else D.default_lexicon()
    cands = _read_candidates(args.candidates)
    refs_all = D.load_jsonl(args.references).subset(style=args.style).references()
    missing = sorted(set(cands) - set(refs_all))
    if missing:
        raise D.DatasetError(f"{len(missing)} candidate images have no references, e.g. {missing[0]!r}")
    refs = {k: refs_all[k] for k in cands}
    report = evaluate_corpus(cands, refs, lexicon, config={"candidates": str(args.candidates),
                                                           "references": str(args.references),
                                                           "style": args.style})
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(report.table())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attendgan", description="Attention captioner with adversarial style training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def training_flags(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="write a synthetic captioning corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=40, help="scenes per style")
    s.add_argument("--style", choices=("factual", "positive", "negative", "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lexicon", help="style lexicon JSON (default built-in)")
    s.add_argument("--lexicon-out", help="also write the lexicon used")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-gen", help="MLE-pretrain the generator on factual captions")
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir", required=True)
    training_flags(s)
    s.set_defaults(func=cmd_pretrain_gen)

    s = sub.add_parser("pretrain-disc", help="pretrain the critic against the frozen generator")
    s.add_argument("--data", required=True)
    s.add_argument("--gen-checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    training_flags(s)
    s.set_defaults(func=cmd_pretrain_disc)

    s = sub.add_parser("adversarial", help="adversarial fine-tuning on styled captions")
    s.add_argument("--data", required=True)
    s.add_argument("--gen-checkpoint", required=True)
    s.add_argument("--disc-checkpoint", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume", help="continue from an epoch checkpoint")
    s.add_argument("--epochs", type=int, help="stop after this many more epochs")
    training_flags(s)
    s.set_defaults(func=cmd_adversarial)

    s = sub.add_parser("sample", help="caption images with a trained generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("greedy", "multinomial"), default="greedy")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=D.SPLITS, default="test")
    s.add_argument("--style", choices=D.STYLES)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="BLEU, ROUGE-L, CIDEr-D and style diversity")
    s.add_argument("--candidates", required=True)
    s.add_argument("--references", required=True)
    s.add_argument("--lexicon")
    s.add_argument("--report")
    s.add_argument("--style", choices=D.STYLES, help="restrict references to one style")
    s.set_defaults(func=cmd_evaluate)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand (synth, pretrain-gen, pretrain-disc, adversarial, sample, evaluate)")
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail("io", str(exc), EXIT_FAILURE)
    except ck.CheckpointError as exc:
        return _fail("checkpoint", str(exc), EXIT_FAILURE)
    except (D.DatasetError, D.CaptionTooLongError) as exc:
        return _fail("data", str(exc), EXIT_FAILURE)
    except T.TrainingDiverged as exc:
        return _fail("diverged", str(exc), EXIT_FAILURE)
    except ValueError as exc:
        return _fail("invalid", str(exc), EXIT_FAILURE)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
