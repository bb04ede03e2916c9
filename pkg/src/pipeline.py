"""
Pipeline Stages
Per-scene stage runner over the artifact layout <output_root>/<scene_id>/<stage>/.
Stages are idempotent: each writes a stamp hashing its parameters and upstream stamps,
and is skipped when the stamp still matches.
"""

import hashlib
import json
import os
import shutil
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from loguru import logger

from .bev_renderer import draw_marks, load_canvas, remove_ceiling, render_bev, save_canvas
from .config import RunConfig, load_gateway_config
from .errors import MissingArtifact, ParseError
from .eval_harness import EvalReport, evaluate
from .keyframe_selector import select_keyframes, write_keyframes
from .lmm_gateway import LMMGateway, ModelResponse, ResponseLog, summarize_usage
from .prompt_bundler import SceneArtifacts, assemble_bundle, read_bundle_index, write_bundle, write_bundle_index
from .qa_generator import QACategory, QAGenerator, QAItem, import_external_items, read_shard, write_shard
from .scene_ingest import (
    SceneManifest,
    SceneManifestParser,
    load_manifest,
    load_point_cloud,
    load_scene_cloud,
    write_manifest,
    write_point_cloud,
)

STAGES = ("ingest", "render", "keyframes", "genqa", "bundle", "dispatch", "eval")
STAMP_FILE = ".stamp"

STAGE_PARAMS: Dict[str, Tuple[str, ...]] = {
    "ingest": (),
    "render": ("resolution", "margin_px", "ceiling_keep_fraction"),
    "keyframes": ("occlusion_tolerance", "sample_count", "border_margin", "tile_w", "tile_h"),
    "genqa": (
        "categories", "items_per_category", "base_seed", "direction_scheme", "min_pixel_distance",
        "n_candidates", "distance_metric", "distance_form", "distance_margin_m", "min_abs_distance_m",
        "turn_threshold_deg", "route_clearance_m", "route_spacing_m", "route_candidates",
        "route_augmentation", "external_qa", "resolution", "margin_px", "ceiling_keep_fraction",
    ),
    "bundle": ("no_metadata", "no_filter", "no_rotation", "no_guide", "keyframes_for_spatial", "tile_w", "tile_h"),
}
UPSTREAM: Dict[str, Tuple[str, ...]] = {
    "ingest": (),
    "render": ("ingest",),
    "keyframes": ("ingest",),
    "genqa": ("ingest",),
    "bundle": ("render", "keyframes", "genqa"),
}


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def scene_id_of(manifest_path: str) -> str:
    """Read only the scene_id of a manifest"""
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            document = json.load(f)
        return str(document["scene_id"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(f"cannot read scene_id from {manifest_path}: {e}") from e


class ArtifactLayout:
    """Paths of every stage artifact under one output root"""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)

    def stage_dir(self, scene_id: str, stage: str) -> str:
        return os.path.join(self.root, scene_id, stage)

    def stamp(self, scene_id: str, stage: str) -> str:
        return os.path.join(self.stage_dir(scene_id, stage), STAMP_FILE)

    def manifest(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "ingest"), "manifest.json")

    def bev_base(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "render"), "bev_base.png")

    def bev_marked(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "render"), "bev_marked.png")

    def render_cloud(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "render"), "cloud_no_ceiling.ply")

    def keyframe_index(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "keyframes"), "keyframes.json")

    def shard(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "genqa"), "qa.jsonl")

    def bundle_index(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "bundle"), "index.json")

    def responses(self, scene_id: str) -> str:
        return os.path.join(self.stage_dir(scene_id, "dispatch"), "responses.jsonl")

    def ingested_scenes(self) -> List[str]:
        if not os.path.isdir(self.root):
            return []
        return sorted(d for d in os.listdir(self.root) if os.path.isfile(self.manifest(d)))


class StageRunner:
    """Runs pipeline stages for single scenes"""

    def __init__(
        self,
        config: RunConfig,
        force: bool = False,
        strict: bool = False,
        gateway_factory: Optional[Callable[[RunConfig], LMMGateway]] = None,
        progress: bool = True,
    ):
        self.config = config
        self.force = force
        self.strict = strict
        self.layout = ArtifactLayout(config.output_root)
        self.gateway_factory = gateway_factory or (lambda cfg: LMMGateway(load_gateway_config(cfg.gateway)))
        self.progress = progress

    # ----- stamps -----

    def _read_stamp(self, scene_id: str, stage: str) -> Optional[str]:
        path = self.layout.stamp(scene_id, stage)
        if not os.path.isfile(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return f.read().strip() or None

    def _digest(self, scene_id: str, stage: str, source: str = "") -> str:
        upstream = {name: self._read_stamp(scene_id, name) for name in UPSTREAM[stage]}
        payload = json.dumps({
            "stage": stage,
            "params": self.config.fingerprint(STAGE_PARAMS[stage]),
            "upstream": upstream,
            "source": source,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _up_to_date(self, scene_id: str, stage: str, digest: str) -> bool:
        if self.force:
            return False
        fresh = self._read_stamp(scene_id, stage) == digest
        if fresh:
            logger.bind(scene_id=scene_id, stage=stage).info("Up to date, skipping")
        return fresh

    def _write_stamp(self, scene_id: str, stage: str, digest: str):
        with open(self.layout.stamp(scene_id, stage), "w", encoding="utf-8") as f:
            f.write(digest + "\n")

    def _require(self, path: str, scene_id: str, what: str, stage: str):
        if not os.path.exists(path):
            raise MissingArtifact(f"scene {scene_id}: {what} missing at {path}; run `{stage}` first")

    def _manifest(self, scene_id: str) -> SceneManifest:
        path = self.layout.manifest(scene_id)
        self._require(path, scene_id, "ingested manifest", "ingest")
        return load_manifest(path)

    # ----- stages -----

    def ingest(self, manifest_path: str) -> str:
        """Validate a source manifest and its cloud; returns the scene_id"""
        parser = SceneManifestParser(strict=self.strict)
        manifest = parser.parse_file(manifest_path)
        scene_id = manifest.scene_id
        log = logger.bind(scene_id=scene_id, stage="ingest")
        digest = self._digest(scene_id, "ingest", source=file_digest(manifest_path))
        if self._up_to_date(scene_id, "ingest", digest):
            return scene_id

        cloud = load_scene_cloud(manifest)
        out_dir = self.layout.stage_dir(scene_id, "ingest")
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(manifest, self.layout.manifest(scene_id))
        summary = parser.summary()
        summary["points"] = len(cloud)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        self._write_stamp(scene_id, "ingest", digest)
        log.info("Ingested {} objects, {} frames, {} points", summary["objects"], summary["frames"], len(cloud))
        return scene_id

    def render(self, scene_id: str):
        """Unmarked base BEV for the bundler, a fully marked preview, and the ceiling-free cloud"""
        manifest = self._manifest(scene_id)
        digest = self._digest(scene_id, "render")
        if self._up_to_date(scene_id, "render", digest):
            return
        cfg = self.config
        cloud = remove_ceiling(load_scene_cloud(manifest), cfg.ceiling_keep_fraction)
        canvas = render_bev(cloud, resolution=cfg.resolution, margin_px=cfg.margin_px)
        os.makedirs(self.layout.stage_dir(scene_id, "render"), exist_ok=True)
        save_canvas(canvas, self.layout.bev_base(scene_id))
        save_canvas(draw_marks(canvas, manifest.objects), self.layout.bev_marked(scene_id))
        write_point_cloud(self.layout.render_cloud(scene_id), cloud, binary=True)
        self._write_stamp(scene_id, "render", digest)
        logger.bind(scene_id=scene_id, stage="render").info(
            "Rendered {}px BEV at {:.4f} m/px", cfg.resolution, canvas.meters_per_pixel)

    def keyframes(self, scene_id: str):
        manifest = self._manifest(scene_id)
        digest = self._digest(scene_id, "keyframes")
        if self._up_to_date(scene_id, "keyframes", digest):
            return
        result = select_keyframes(manifest, manifest.objects, self.config.visibility_params())
        out_dir = self.layout.stage_dir(scene_id, "keyframes")
        if os.path.isdir(out_dir):
            shutil.rmtree(out_dir)
        write_keyframes(result, out_dir, self.config.tile_w, self.config.tile_h)
        self._write_stamp(scene_id, "keyframes", digest)
        log = logger.bind(scene_id=scene_id, stage="keyframes")
        log.info("Selected {} keyframes covering {} objects", len(result.selected), len(result.covered))
        if result.uncovered:
            log.warning("Objects never visible: {}", sorted(result.uncovered))

    def genqa(self, scene_id: str) -> List[QAItem]:
        manifest = self._manifest(scene_id)
        shard_path = self.layout.shard(scene_id)
        digest = self._digest(scene_id, "genqa")
        if self._up_to_date(scene_id, "genqa", digest):
            return read_shard(shard_path)
        cfg = self.config
        log = logger.bind(scene_id=scene_id, stage="genqa")
        generator = QAGenerator(manifest, load_scene_cloud(manifest), cfg.qa_config())
        items: List[QAItem] = []
        for category in cfg.categories:
            produced = generator.generate_items(QACategory(category), cfg.items_per_category, cfg.base_seed)
            if len(produced) < cfg.items_per_category:
                log.warning("{}: produced {} of {} items", category, len(produced), cfg.items_per_category)
            items.extend(produced)
        if cfg.external_qa:
            external = import_external_items(cfg.external_qa, manifest)
            log.info("Imported {} external items", len(external))
            items.extend(external)
        os.makedirs(self.layout.stage_dir(scene_id, "genqa"), exist_ok=True)
        write_shard(items, shard_path)
        self._write_stamp(scene_id, "genqa", digest)
        log.info("Wrote {} items to {}", len(items), shard_path)
        return items

    def _artifacts(self, scene_id: str, manifest: SceneManifest) -> SceneArtifacts:
        base_path = self.layout.bev_base(scene_id)
        self._require(base_path, scene_id, "BEV image", "render")
        artifacts = SceneArtifacts(scene=manifest, base_canvas=load_canvas(base_path))
        if not self.config.no_rotation:
            cloud_path = self.layout.render_cloud(scene_id)
            self._require(cloud_path, scene_id, "ceiling-free cloud", "render")
            artifacts.cloud = load_point_cloud(cloud_path)
        index_path = self.layout.keyframe_index(scene_id)
        if os.path.isfile(index_path):
            with open(index_path, "r", encoding="utf-8") as f:
                artifacts.keyframe_index = json.load(f)
            artifacts.keyframe_dir = os.path.dirname(index_path)
        return artifacts

    def bundle(self, scene_id: str) -> List[str]:
        manifest = self._manifest(scene_id)
        shard_path = self.layout.shard(scene_id)
        self._require(shard_path, scene_id, "QA shard", "genqa")
        out_dir = self.layout.stage_dir(scene_id, "bundle")
        index_path = self.layout.bundle_index(scene_id)
        digest = self._digest(scene_id, "bundle")
        if self._up_to_date(scene_id, "bundle", digest):
            return [index_path]

        artifacts = self._artifacts(scene_id, manifest)
        items = read_shard(shard_path)
        if os.path.isdir(out_dir):
            shutil.rmtree(out_dir)
        paths = []
        for item in items:
            bundle = assemble_bundle(item, artifacts, out_dir, self.config.bundle_options())
            paths.append(write_bundle(bundle, out_dir))
        write_bundle_index(paths, index_path)
        self._write_stamp(scene_id, "bundle", digest)
        logger.bind(scene_id=scene_id, stage="bundle").info("Wrote {} bundles", len(paths))
        return paths

    def dispatch(self, scene_id: str) -> List[ModelResponse]:
        """Send the scene's bundles; already answered items are not resent unless forced"""
        index_path = self.layout.bundle_index(scene_id)
        self._require(index_path, scene_id, "bundle index", "bundle")
        bundles = read_bundle_index(index_path)
        log_path = self.layout.responses(scene_id)
        os.makedirs(os.path.dirname(log_path), exist_ok=True)
        if self.force and os.path.exists(log_path):
            os.remove(log_path)
        gateway = self.gateway_factory(self.config)
        responses = gateway.run_batch(
            bundles, concurrency=self.config.concurrency, response_log=ResponseLog(log_path), progress=self.progress)
        failed = [r for r in responses if not r.ok]
        log = logger.bind(scene_id=scene_id, stage="dispatch")
        log.info("{} responses, {} failed, usage {}", len(responses), len(failed), summarize_usage(responses))
        return responses

    def evaluate(self, scene_ids: Iterable[str]) -> EvalReport:
        """Score every scene's shard against its latest responses"""
        items: List[QAItem] = []
        responses: List[ModelResponse] = []
        for scene_id in scene_ids:
            shard_path = self.layout.shard(scene_id)
            self._require(shard_path, scene_id, "QA shard", "genqa")
            items.extend(read_shard(shard_path))
            responses.extend(ResponseLog(self.layout.responses(scene_id)).latest().values())
        return evaluate(items, responses, weighted=self.config.weighted_average)
