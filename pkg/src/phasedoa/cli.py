"""
Command-line entry point: ``phasedoa {synth,train,eval,infer}``.

One JSON config drives every step (see ``configs/desk_scale.json``).
Exit codes: 0 success, 2 config error, 3 I/O error, 4 shape or
compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cnn
from .evaluate import load_conditions, run_experiment, write_posterior_csv
from .geometry import (SOUND_SPEED, ArrayGeometry, DoaGrid, PerturbationSpec, apply_perturbation,
                       middle_mic_perturbation)
from .room import InfeasibleRt60Error, PlacementError, RoomSpec
from .srp import build_steering_table
from .stft import StftParams, phase_maps, stft
from .synth import (ShardError, SynthConfig, TestSetConfig, manifest_digest, read_shard, read_wav,
                    room_positions, speech_shaped_noise, synthesize_test_set, synthesize_training_set)

log = logging.getLogger("phasedoa")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


class ExperimentConfig:
    """Parsed experiment configuration; section names mirror the modules."""

    def __init__(self, raw: dict, seed: int | None = None):
        self.raw = raw
        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        self.sample_rate = int(raw.get("sample_rate", 16000))
        self.sound_speed = float(raw.get("sound_speed", SOUND_SPEED))
        try:
            self.geometry = ArrayGeometry.from_dict(self._section("geometry"))
            self.grid = DoaGrid(float(self._section("grid")["resolution_deg"]))
            self.stft = StftParams(**raw.get("stft", {}))
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def _section(self, name):
        if name not in self.raw:
            raise ConfigError(f"missing section {name!r}")
        return self.raw[name]

    def _rooms(self, split):
        rooms = self._section("rooms")
        if split not in rooms or not rooms[split]:
            raise ConfigError(f"missing field 'rooms.{split}'")
        entries = rooms[split]
        if split == "test":
            # a matched-condition test room may name its training room instead of repeating it
            train = {r.get("name"): r for r in rooms.get("train", [])}
            entries = [{**train.get(r.get("train_room"), {}), **r} for r in entries]
        try:
            return [RoomSpec.from_dict(r, self.sample_rate) for r in entries]
        except KeyError as exc:
            raise ConfigError(f"rooms.{split}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"rooms.{split}: {exc}") from None

    def synth_config(self) -> SynthConfig:
        s = self._section("synthesis")
        try:
            return SynthConfig(
                rooms=self._rooms("train"), geometry=self.geometry, grid=self.grid,
                array_positions_per_room=int(s["array_positions_per_room"]),
                source_distances=tuple(float(d) for d in s["source_distances"]),
                snr_range=tuple(float(v) for v in s.get("snr_range_db", (0.0, 20.0))),
                utterance_length=float(s["utterance_length_s"]),
                utterances_per_condition=int(s["utterances_per_condition"]),
                seed=self.seed, stft=self.stft, sound_speed=self.sound_speed,
                position_margin=float(s.get("position_margin_m", 1.0)))
        except KeyError as exc:
            raise ConfigError(f"synthesis: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synthesis: {exc}") from None

    def validation_config(self, train: SynthConfig, positions) -> SynthConfig:
        s = self._section("synthesis")
        return replace(train, seed=self.seed + 1,
                       utterances_per_condition=int(s.get("validation_utterances", 1)),
                       utterance_length=float(s.get("validation_length_s", train.utterance_length)),
                       array_positions={i: p for i, p in enumerate(positions)})

    def architecture(self) -> cnn.Architecture:
        a = dict(self.raw.get("architecture", {}))
        try:
            return cnn.Architecture(input_shape=(self.geometry.n_mics, self.stft.bin_count),
                                    n_classes=self.grid.class_count, **a)
        except TypeError as exc:
            raise ConfigError(f"architecture: {exc}") from None

    def train_config(self, threads: int, deterministic: bool) -> cnn.TrainConfig:
        t = dict(self.raw.get("training", {}))
        try:
            cfg = cnn.TrainConfig(seed=self.seed, **t)
        except TypeError as exc:
            raise ConfigError(f"training: {exc}") from None
        return replace(cfg, threads=1 if deterministic else max(1, threads))

    def test_configs(self) -> list[tuple[TestSetConfig, list]]:
        t = self._section("test")
        rooms = self._rooms("test")
        raw_rooms = self.raw["rooms"]["test"]
        positions = None
        out = []
        clips = self._clips(t)
        for i, (room, rr) in enumerate(zip(rooms, raw_rooms)):
            if "array_center" in rr:
                center = tuple(float(v) for v in rr["array_center"])
            elif "train_position" in rr:
                if positions is None:
                    train = self.synth_config()
                    positions = dict(zip([r.name for r in train.rooms], room_positions(train)))
                key = rr.get("train_room", room.name)
                if key not in positions:
                    raise ConfigError(f"rooms.test[{i}]: no training room named {key!r}")
                center = positions[key][int(rr["train_position"])]
            else:
                raise ConfigError(f"rooms.test[{i}]: missing field 'array_center' or 'train_position'")
            if "source_distance" not in rr:
                raise ConfigError(f"rooms.test[{i}]: missing field 'source_distance'")
            geoms = [(False, self.geometry)]
            pert = t.get("perturbation_m")
            if pert:
                if len(pert) == 2:
                    spec = middle_mic_perturbation(self.geometry, tuple(pert))
                else:
                    spec = PerturbationSpec(np.asarray(pert, dtype=float))
                geoms.append((True, apply_perturbation(self.geometry, spec)))
            for perturbed, g in geoms:
                name = f"{room.name or f'room{i}'}{'_perturbed' if perturbed else ''}"
                angles = t.get("clip_angles")
                cfg = TestSetConfig(room, center, float(rr["source_distance"]), g, self.grid,
                                    snr_db=tuple(float(v) for v in t.get("snr_db", (5.0, 15.0))),
                                    clip_angles=None if angles is None else tuple(angles),
                                    seed=self.seed + 100 + i, stft=self.stft,
                                    sound_speed=self.sound_speed, name=name)
                out.append((cfg, clips, perturbed))
        return out

    def _clips(self, t):
        wavs = t.get("speech_wavs") or []
        if wavs:
            return [Path(w) for w in wavs]
        n = int(t.get("synthetic_clips", 20))
        length = float(t.get("clip_length_s", 4.0))
        return [speech_shaped_noise(length, self.sample_rate, seed=self.seed + 1000 + i) for i in range(n)]

    def inference_extra(self) -> dict:
        return {"grid_resolution_deg": self.grid.resolution_deg, "stft": self.stft.to_dict(),
                "sample_rate": self.sample_rate, "sound_speed": self.sound_speed,
                "geometry": self.geometry.to_dict()}


def load_config(path, seed=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig(raw, seed)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = 1 if args.deterministic else args.threads
    if args.split == "train":
        train = cfg.synth_config()
        log.info("synthesising %d conditions, %d frames expected", train.condition_count(), train.expected_frames())
        man = synthesize_training_set(train, out / "train.doas", threads=threads, provenance="train")
        val = cfg.validation_config(train, [[tuple(c) for c in p] for p in man["array_positions"]])
        vman = synthesize_training_set(val, out / "val.doas", threads=threads, provenance="validation")
        man["validation"] = vman["shards"][0]
        man["digest"] = manifest_digest({"shards": man["shards"] + vman["shards"], "seed": man["seed"]})
    else:
        shards = []
        for tcfg, clips, perturbed in cfg.test_configs():
            m = synthesize_test_set(tcfg, clips, out)
            for s in m["shards"]:
                s.update(room=tcfg.room.name, distance_m=tcfg.source_distance, perturbed=perturbed,
                         clip_angles=m["clip_angles"])
            shards += m["shards"]
        man = {"kind": "test", "shards": shards, "seed": cfg.seed,
               "n_mics": cfg.geometry.n_mics, "n_bins": cfg.stft.bin_count, "n_classes": cfg.grid.class_count}
        man["frame_count"] = sum(s["frame_count"] for s in shards)
        man["digest"] = manifest_digest(man)
    _write_json(out / "manifest.json", man)
    log.info("wrote %d frames to %s (digest %s)", man["frame_count"], out, man["digest"][:12])
    return EXIT_OK


def _read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'phasedoa synth' first")
    return json.loads(path.read_text())


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    man = _read_manifest(args.data)
    data = Path(args.data)
    arch = cfg.architecture()
    train = read_shard(data / man["shards"][0]["path"])
    if (train.n_mics, train.n_bins, train.n_classes) != (*arch.input_shape, arch.n_classes):
        raise cnn.ShapeMismatchError(
            f"shard (M={train.n_mics}, K={train.n_bins}, I={train.n_classes}) does not match the "
            f"architecture (M={arch.input_shape[0]}, K={arch.input_shape[1]}, I={arch.n_classes})")
    val = read_shard(data / man["validation"]["path"]) if "validation" in man else None
    tcfg = cfg.train_config(args.threads, args.deterministic)
    out = Path(args.out)
    if args.resume and out.exists():
        net = cnn.load_checkpoint(out, expected_classes=arch.n_classes, expected_input=arch.input_shape)
        log.info("resuming from step %d", net.step)
    else:
        net = cnn.Network(arch, seed=cfg.seed)

    def progress(row):
        log.info("epoch %d: train %.4f val %s", row["epoch"], row["train_loss"], row.get("val_loss"))

    result = cnn.train(net, train.phase_maps, train.labels, tcfg,
                       None if val is None else val.phase_maps, None if val is None else val.labels,
                       on_epoch=progress)
    digest = tcfg.digest() + ":" + man.get("digest", "")[:16]
    out.parent.mkdir(parents=True, exist_ok=True)
    cnn.save_checkpoint(out, result.network, digest, cfg.inference_extra())
    loss_csv = out.with_suffix(".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "train_loss", "val_loss", "val_accuracy", "first_batch_loss"])
        for i, r in enumerate(result.epochs):
            first = result.batch_losses[0] if i == 0 and result.batch_losses else ""
            w.writerow([r["epoch"], r["step"], repr(r["train_loss"]), repr(r.get("val_loss", "")),
                        repr(r.get("val_accuracy", "")), repr(first) if first != "" else ""])
    log.info("saved %s (step %d, best epoch %d)", out, result.network.step, result.best_epoch)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    methods = ("cnn", "srp-phat") if args.method == "both" else (args.method,)
    net = None
    if "cnn" in methods:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required for the cnn method")
        net = cnn.load_checkpoint(args.checkpoint, expected_classes=cfg.grid.class_count,
                                  expected_input=(cfg.geometry.n_mics, cfg.stft.bin_count))
    man = _read_manifest(args.data)
    if (man["n_mics"], man["n_bins"], man["n_classes"]) != (cfg.geometry.n_mics, cfg.stft.bin_count,
                                                            cfg.grid.class_count):
        raise cnn.ShapeMismatchError("test data dimensions do not match the config")
    table = build_steering_table(cfg.geometry, cfg.grid, cfg.stft, cfg.sample_rate, cfg.sound_speed)
    conditions = load_conditions(man, args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    threads = 1 if args.deterministic else args.threads
    res = run_experiment(conditions, net, table, methods, csv_path=out, threads=threads)
    which = int(cfg.raw.get("evaluation", {}).get("posterior_condition", 0))
    curves = []
    if res.curves:
        chosen = res.curves.get(which, {})
        curves = [chosen[k] for k in sorted(chosen, key=lambda k: (k[1], methods.index(k[0])))]
    write_posterior_csv(curves, out.with_name(out.stem + "_posterior.csv"))
    for r in res.reports:
        log.info("%-8s %-14s snr=%5.1f perturbed=%d  %.1f%% of %d frames", r.method, r.room, r.snr_db,
                 r.perturbed, r.accuracy_pct, r.n_active)
    return EXIT_OK


def cmd_infer(args) -> int:
    net = cnn.load_checkpoint(args.checkpoint)
    extra = getattr(net, "manifest", {}).get("extra", {})
    params = StftParams(**extra.get("stft", {}))
    grid = DoaGrid(float(extra.get("grid_resolution_deg", 180.0 / (net.n_classes - 1))))
    if grid.class_count != net.n_classes:
        raise cnn.ArchitectureMismatchError("checkpoint grid and class count disagree")
    fs, x = read_wav(args.wav)
    M = net.arch.input_shape[0]
    if x.shape[0] != M:
        raise cnn.ShapeMismatchError(f"{args.wav} has {x.shape[0]} channels, the network expects {M}")
    if "sample_rate" in extra and fs != int(extra["sample_rate"]):
        raise cnn.ShapeMismatchError(f"{args.wav} is {fs} Hz, the network was trained at {extra['sample_rate']} Hz")
    if params.frame_count(x.shape[1]) == 0:
        return EXIT_OK
    post = cnn.predict_proba(net, phase_maps(stft(x, params)).astype(np.float32))
    est = cnn.decode_classes(post)
    out = sys.stdout
    for n, (c, p) in enumerate(zip(est, post)):
        out.write(f"{n},{grid.angles_deg[c]:g},{p[c]:.6f}\n")
    out.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phasedoa", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
        p.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = sub.add_parser("synth", help="synthesise training or test shards")
    common(p)
    p.add_argument("--split", choices=["train", "test"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the CNN on synthesised shards")
    common(p)
    p.add_argument("--data", required=True, help="directory written by 'synth --split train'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint at --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score CNN and/or SRP-PHAT on test shards")
    common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (needed for the cnn method)")
    p.add_argument("--data", required=True, help="directory written by 'synth --split test'")
    p.add_argument("--out", required=True, help="accuracy CSV path; posteriors go next to it")
    p.add_argument("--method", choices=["cnn", "srp-phat", "both"], default="both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-frame DOA of a multichannel WAV, printed as CSV lines")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True, help="multichannel PCM16 or float32 WAV")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InfeasibleRt60Error, PlacementError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (cnn.ShapeMismatchError, cnn.ArchitectureMismatchError) as exc:
        log.error("incompatible inputs: %s", exc)
        return EXIT_SHAPE
    except (OSError, ShardError, cnn.CheckpointError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
