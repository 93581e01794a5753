"""Line-oriented CSV persistence for every pipeline artifact. All writers are
byte-deterministic: fixed float formats, sorted iteration, '\\n' newlines,
mandatory header lines."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .embed import EmbeddingModel, TraceRow
from .errors import DataError
from .geometry import ConsistencyScore, ScoreStore
from .variants import DomainShift, PromptSet
from .worldgen import (
    CameraIntrinsics,
    CameraPose,
    Landmark,
    LocalFeature,
    ViewImage,
    World,
)

F9 = "%.9g"  # world-level floats
F17 = "%.17g"  # model weights, exact round-trip


def fmt(x: float, spec: str = F9) -> str:
    return spec % float(x)


def prompt_slug(name: str) -> str:
    return name.replace(" ", "_")


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path) as fh:
        return [ln.rstrip("\n") for ln in fh]


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


def _feature_lines(view: ViewImage) -> list[str]:
    d = view.features[0].descriptor.shape[0]
    lines = ["u,v,landmark_id," + ",".join(f"desc{i}" for i in range(d))]
    for f in view.features:
        lid = -1 if f.landmark_id is None else f.landmark_id
        lines.append(
            ",".join(
                [fmt(f.keypoint[0]), fmt(f.keypoint[1]), str(lid)]
                + [fmt(x) for x in f.descriptor]
            )
        )
    return lines


def _parse_features(lines: list[str]) -> list[LocalFeature]:
    feats = []
    for ln in lines[1:]:
        parts = ln.split(",")
        lid = int(parts[2])
        feats.append(
            LocalFeature(
                keypoint=np.array([float(parts[0]), float(parts[1])]),
                descriptor=np.array([float(x) for x in parts[3:]]),
                landmark_id=None if lid < 0 else lid,
            )
        )
    return feats


def _view_line(view: ViewImage) -> str:
    q = view.pose.rotation
    p = view.pose.position
    return ",".join(
        [str(view.id)]
        + [fmt(x) for x in (q[0], q[1], q[2], q[3], p[0], p[1], p[2])]
        + [view.condition]
    )


def save_world(world: World, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    d = world.landmarks[0].base_descriptor.shape[0]

    lines = ["id,x,y,z," + ",".join(f"desc{i}" for i in range(d))]
    for lm in world.landmarks:
        lines.append(
            ",".join([str(lm.id)] + [fmt(x) for x in lm.position] + [fmt(x) for x in lm.base_descriptor])
        )
    _write_lines(out / "landmarks.csv", lines)

    lines = ["id,qw,qx,qy,qz,tx,ty,tz,condition"]
    for v in list(world.map_views) + list(world.query_views):
        lines.append(_view_line(v))
    _write_lines(out / "views.csv", lines)

    for v in list(world.map_views) + list(world.query_views):
        _write_lines(out / "features" / f"{v.id}.csv", _feature_lines(v))

    lines = ["a,b,count"]
    for a, b, c in world.matching_pairs:
        lines.append(f"{a},{b},{c}")
    _write_lines(out / "pairs.csv", lines)

    intr = world.map_views[0].intrinsics
    meta = [
        "key,value",
        f"seed,{world.seed}",
        f"descriptor_dim,{d}",
        f"num_map_views,{len(world.map_views)}",
        f"num_query_views,{len(world.query_views)}",
        f"focal,{fmt(intr.focal)}",
        f"cx,{fmt(intr.principal_point[0])}",
        f"cy,{fmt(intr.principal_point[1])}",
        f"width,{intr.image_size[0]}",
        f"height,{intr.image_size[1]}",
    ]
    _write_lines(out / "meta.csv", meta)


def load_world(in_dir: str | os.PathLike) -> World:
    src = Path(in_dir)
    meta = dict(ln.split(",", 1) for ln in _read_lines(src / "meta.csv")[1:])
    intr = CameraIntrinsics(
        focal=float(meta["focal"]),
        principal_point=np.array([float(meta["cx"]), float(meta["cy"])]),
        image_size=(int(meta["width"]), int(meta["height"])),
    )

    landmarks = []
    for ln in _read_lines(src / "landmarks.csv")[1:]:
        parts = ln.split(",")
        landmarks.append(
            Landmark(
                id=int(parts[0]),
                position=np.array([float(x) for x in parts[1:4]]),
                base_descriptor=np.array([float(x) for x in parts[4:]]),
            )
        )

    n_map = int(meta["num_map_views"])
    map_views: list[ViewImage] = []
    query_views: list[ViewImage] = []
    for row, ln in enumerate(_read_lines(src / "views.csv")[1:]):
        parts = ln.split(",")
        vid = int(parts[0])
        pose = CameraPose(
            rotation=np.array([float(x) for x in parts[1:5]]),
            position=np.array([float(x) for x in parts[5:8]]),
        )
        condition = parts[8]
        feats = _parse_features(_read_lines(src / "features" / f"{vid}.csv"))
        view = ViewImage(id=vid, pose=pose, intrinsics=intr, features=feats, condition=condition)
        (map_views if row < n_map else query_views).append(view)

    pairs = []
    for ln in _read_lines(src / "pairs.csv")[1:]:
        a, b, c = ln.split(",")
        pairs.append((int(a), int(b), int(c)))

    return World(
        landmarks=landmarks,
        map_views=map_views,
        query_views=query_views,
        matching_pairs=pairs,
        seed=int(meta["seed"]),
    )


# ---------------------------------------------------------------------------
# prompts and variants
# ---------------------------------------------------------------------------


def save_prompts(prompts: PromptSet, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    d = prompts.shifts[0].descriptor_bias.shape[0] if prompts.shifts else 0
    lines = [
        "name,bias_gain,descriptor_noise_sigma,dropout_rate,clutter_rate,keypoint_corruption_sigma,"
        + ",".join(f"bias{i}" for i in range(d))
    ]
    for s in prompts.shifts:
        lines.append(
            ",".join(
                [
                    s.name,
                    fmt(s.bias_gain),
                    fmt(s.descriptor_noise_sigma),
                    fmt(s.dropout_rate),
                    fmt(s.clutter_rate),
                    fmt(s.keypoint_corruption_sigma),
                ]
                + [fmt(x) for x in s.descriptor_bias]
            )
        )
    _write_lines(out / "prompts.csv", lines)


def load_prompts(in_dir: str | os.PathLike) -> PromptSet:
    shifts = []
    for ln in _read_lines(Path(in_dir) / "prompts.csv")[1:]:
        parts = ln.split(",")
        shifts.append(
            DomainShift(
                name=parts[0],
                bias_gain=float(parts[1]),
                descriptor_noise_sigma=float(parts[2]),
                dropout_rate=float(parts[3]),
                clutter_rate=float(parts[4]),
                keypoint_corruption_sigma=float(parts[5]),
                descriptor_bias=np.array([float(x) for x in parts[6:]]),
            )
        )
    return PromptSet(shifts=shifts)


def save_variants(
    variants: dict[int, list[ViewImage]], out_dir: str | os.PathLike
) -> None:
    out = Path(out_dir)
    for vid in sorted(variants):
        for view in variants[vid]:
            _write_lines(
                out / "features_variants" / prompt_slug(view.condition) / f"{vid}.csv",
                _feature_lines(view),
            )


def load_variants(
    in_dir: str | os.PathLike, world: World, prompts: PromptSet
) -> dict[int, list[ViewImage]]:
    src = Path(in_dir) / "features_variants"
    by_id = {v.id: v for v in world.map_views}
    out: dict[int, list[ViewImage]] = {}
    for vid in sorted(by_id):
        row = []
        for shift in prompts.shifts:
            path = src / prompt_slug(shift.name) / f"{vid}.csv"
            feats = _parse_features(_read_lines(path))
            base = by_id[vid]
            row.append(
                ViewImage(
                    id=vid,
                    pose=base.pose,
                    intrinsics=base.intrinsics,
                    features=feats,
                    condition=shift.name,
                )
            )
        out[vid] = row
    return out


# ---------------------------------------------------------------------------
# consistency scores
# ---------------------------------------------------------------------------


def save_scores(
    scores: ScoreStore, c_tau: float, threshold_mode: str, out_dir: str | os.PathLike
) -> None:
    from .geometry import validate_pair

    lines = ["query_id,positive_id,prompt,s,kept,original,valid@c_tau"]
    for (q, p, prompt), s in sorted(scores.items()):
        valid = int(validate_pair(s, c_tau, threshold_mode))
        lines.append(f"{q},{p},{prompt},{s.value:.6f},{s.kept},{s.original},{valid}")
    _write_lines(Path(out_dir) / "consistency.csv", lines)


def load_scores(in_dir: str | os.PathLike) -> ScoreStore:
    store = ScoreStore()
    for ln in _read_lines(Path(in_dir) / "consistency.csv")[1:]:
        q, p, prompt, s, kept, original, _valid = ln.split(",")
        store.add(
            int(q), int(p), prompt, ConsistencyScore(float(s), int(kept), int(original))
        )
    return store


# ---------------------------------------------------------------------------
# model and training trace
# ---------------------------------------------------------------------------


def save_model(model: EmbeddingModel, path: str | os.PathLike) -> None:
    lines = [f"{model.e},{model.d}"]
    for row in model.projection:
        lines.append(",".join(fmt(x, F17) for x in row))
    _write_lines(Path(path), lines)


def load_model(path: str | os.PathLike) -> EmbeddingModel:
    lines = _read_lines(Path(path))
    e, d = (int(x) for x in lines[0].split(","))
    W = np.array([[float(x) for x in ln.split(",")] for ln in lines[1 : 1 + e]])
    if W.shape != (e, d):
        raise DataError(f"model shape mismatch in {path}")
    return EmbeddingModel(projection=W)


def save_trace(trace: list[TraceRow], path: str | os.PathLike) -> None:
    lines = ["episode,mean_loss,synth_fraction"]
    for row in trace:
        lines.append(f"{row.episode},{fmt(row.mean_loss)},{fmt(row.synth_fraction)}")
    _write_lines(Path(path), lines)


# ---------------------------------------------------------------------------
# evaluation outputs
# ---------------------------------------------------------------------------


def save_rankings(rankings: dict[int, list[tuple[int, float]]], path: str | os.PathLike) -> None:
    lines = ["query_id,rank,view_id,score"]
    for qid in sorted(rankings):
        for rank, (vid, score) in enumerate(rankings[qid], start=1):
            lines.append(f"{qid},{rank},{vid},{score:.6f}")
    _write_lines(Path(path), lines)


def save_localization(rows: list[dict], path: str | os.PathLike) -> None:
    lines = ["query_id,protocol,k,tx_err_m,rot_err_deg,status"]
    for r in rows:
        if r["status"] == "ok":
            lines.append(
                f"{r['query_id']},{r['protocol']},{r['k']},{fmt(r['tx_err'])},{fmt(r['rot_err'])},ok"
            )
        else:
            lines.append(f"{r['query_id']},{r['protocol']},{r['k']},,,{r['status']}")
    _write_lines(Path(path), lines)


def save_summary(rows: list[dict], path: str | os.PathLike) -> None:
    lines = ["protocol,k,condition,pct@high,pct@mid,pct@low"]
    for r in rows:
        lines.append(
            f"{r['protocol']},{r['k']},{r['condition']},"
            f"{r['high']:.2f},{r['mid']:.2f},{r['low']:.2f}"
        )
    _write_lines(Path(path), lines)


def load_summary(path: str | os.PathLike) -> list[dict]:
    rows = []
    for ln in _read_lines(Path(path))[1:]:
        protocol, k, condition, hi, mid, lo = ln.split(",")
        rows.append(
            {
                "protocol": protocol,
                "k": int(k),
                "condition": condition,
                "high": float(hi),
                "mid": float(mid),
                "low": float(lo),
            }
        )
    return rows
