"""Command-line client for the thgraph service.

Every subcommand builds a request for the HTTP API and renders the response.
With ``--server URL`` the request goes to a running service; without it the
service app runs in-process, so the CLI works standalone.  ``thgraph serve``
starts the service itself.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _make_client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server.rstrip("/"), timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette warns about the installed httpx major version; harmless in-process
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

        from .service.app import app

        return TestClient(app)


def _post(client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except (ValueError, json.JSONDecodeError):
            detail = response.text
        print(f"error ({response.status_code}): {detail}", file=sys.stderr)
        raise SystemExit(1)
    return response.json()


def _add_server_flag(parser: argparse.ArgumentParser):
    parser.add_argument("--server", default=None, help="service URL; default runs the service in-process")


def _cmd_synth(args) -> int:
    payload = {
        "out_dir": args.out,
        "num_classes": args.num_classes,
        "clips_train": args.clips_train,
        "clips_eval": args.clips_eval,
        "clip_ms": args.clip_ms,
        "audio_seg_ms": args.audio_seg_ms,
        "video_seg_ms": args.video_seg_ms,
        "audio_dim": args.audio_dim,
        "video_dim": args.video_dim,
        "labels_min": args.labels_min,
        "labels_max": args.labels_max,
        "noise_sigma_audio": args.noise_sigma_audio,
        "noise_sigma_video": args.noise_sigma_video,
        "lag_ms": args.lag_ms,
        "event_len_ms": args.event_len_ms,
        "seed": args.seed,
    }
    with _make_client(args.server) as client:
        data = _post(client, "/synth", payload)
    print(f"train_manifest {data['train_manifest']}")
    print(f"eval_manifest {data['eval_manifest']}")
    print(f"events_file {data['events_file']}")
    print(f"clips {data['num_train']}+{data['num_eval']}")
    return 0


def _cmd_describe(args) -> int:
    payload = {"manifest": args.manifest, "num_classes": args.num_classes}
    with _make_client(args.server) as client:
        data = _post(client, "/describe", payload)
    print(data["text"], end="")
    return 0


def _cmd_build_graph(args) -> int:
    payload = {
        "audio_path": args.audio,
        "video_path": args.video,
        "span_audio": args.span_audio,
        "span_video": args.span_video,
        "span_inter": args.span_inter,
        "dilation_audio": args.dilation_audio,
        "dilation_video": args.dilation_video,
        "tau": args.tau,
        "xi_mode": args.xi_mode,
        "xi_seed": args.xi_seed,
        "temporal_mode": args.temporal_mode,
        "seed": args.seed,
        "clip_id": args.clip_id,
    }
    with _make_client(args.server) as client:
        data = _post(client, "/build-graph", payload)
    if args.out:
        Path(args.out).write_text(data["dump"], encoding="utf-8")
        print(f"wrote {args.out} ({data['intra_audio_edges']}+{data['intra_video_edges']}"
              f"+{data['inter_edges']} edges)")
    else:
        print(data["dump"], end="")
    return 0


def _cmd_train(args) -> int:
    payload = {
        "manifest": args.manifest,
        "out_dir": args.out,
        "config_path": args.config,
        "eval_manifest": args.eval_manifest,
        "seed": args.seed,
        "loss_mode": args.loss_mode,
        "temporal_mode": args.temporal_mode,
    }
    with _make_client(args.server) as client:
        data = _post(client, "/train", payload)
    print(f"checkpoint {data['checkpoint']}")
    print(f"log {data['log_file']}")
    print(f"curves {data['loss_curve']} {data['eval_curve']}")
    best_map = data["best_map"]
    best_auc = data["best_auc"]
    print(f"iterations {data['iterations_run']} stopped_early {str(data['stopped_early']).lower()}")
    if best_map is not None:
        print(f"best_map {best_map:.6f} best_auc {best_auc:.6f} at_iter {data['best_iteration']}")
    else:
        print("best_map n/a (no evaluation ran)")
    return 0


def _cmd_eval(args) -> int:
    payload = {"checkpoint": args.checkpoint, "manifest": args.manifest, "out_dir": args.out}
    with _make_client(args.server) as client:
        data = _post(client, "/eval", payload)
    map_s = f"{data['map']:.6f}" if data["map"] is not None else "undefined"
    auc_s = f"{data['auc']:.6f}" if data["auc"] is not None else "undefined"
    print(f"mAP {map_s}")
    print(f"AUC {auc_s}")
    for c in sorted(data["ap_per_class"], key=int):
        print(f"class {c} ap={data['ap_per_class'][c]:.6f}")
    if data["skipped_ap"]:
        print("skipped_ap " + ",".join(map(str, data["skipped_ap"])))
    if data["metrics_file"]:
        print(f"metrics_file {data['metrics_file']}")
        print(f"summary_file {data['summary_file']}")
    return 0


def _cmd_gradcheck(args) -> int:
    payload = {"level": args.level, "trials": args.trials, "seed": args.seed}
    with _make_client(args.server) as client:
        data = _post(client, "/gradcheck", payload)
    for line in data["lines"]:
        print(line)
    return 0 if data["passed"] else 1


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("thgraph.service.app:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thgraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic audio-visual dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--clips-train", type=int, default=512)
    p.add_argument("--clips-eval", type=int, default=128)
    p.add_argument("--clip-ms", type=int, default=10_000)
    p.add_argument("--audio-seg-ms", type=int, default=960)
    p.add_argument("--video-seg-ms", type=int, default=250)
    p.add_argument("--audio-dim", type=int, default=128)
    p.add_argument("--video-dim", type=int, default=1024)
    p.add_argument("--labels-min", type=int, default=1)
    p.add_argument("--labels-max", type=int, default=3)
    p.add_argument("--noise-sigma-audio", type=float, default=0.1)
    p.add_argument("--noise-sigma-video", type=float, default=0.1)
    p.add_argument("--lag-ms", type=int, default=0)
    p.add_argument("--event-len-ms", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=0)
    _add_server_flag(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("describe", help="summarize a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--num-classes", type=int, default=None)
    _add_server_flag(p)
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("build-graph", help="dump one clip's graph edges and weights")
    p.add_argument("--audio", required=True, help="audio feature file")
    p.add_argument("--video", required=True, help="video feature file")
    p.add_argument("--span-audio", type=int, default=6)
    p.add_argument("--span-video", type=int, default=4)
    p.add_argument("--span-inter", type=int, default=3)
    p.add_argument("--dilation-audio", type=int, default=3)
    p.add_argument("--dilation-video", type=int, default=4)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--xi-mode", choices=("sampled", "fixed"), default="sampled")
    p.add_argument("--xi-seed", type=int, default=0)
    p.add_argument("--temporal-mode", choices=("gau_haw", "both_haw", "both_gau"), default="gau_haw")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-id", default=None)
    p.add_argument("--out", default=None, help="write the dump here instead of stdout")
    _add_server_flag(p)
    p.set_defaults(func=_cmd_build_graph)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoint/logs")
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss-mode", choices=("fl_cl", "fl_only", "ce_only"), default=None)
    p.add_argument("--temporal-mode", choices=("gau_haw", "both_haw", "both_gau"), default=None)
    _add_server_flag(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="directory for metrics files")
    _add_server_flag(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--level", choices=("ops", "model", "all"), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_server_flag(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
