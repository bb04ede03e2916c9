"""
Run Configuration
JSON run config with documented defaults, gateway settings with the API key taken from
the environment, and loguru setup
"""

import glob
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional

from dotenv import load_dotenv
from loguru import logger

from .errors import ConfigError, ToolkitValidationError
from .keyframe_selector import VisibilityParams
from .lmm_gateway import GatewayConfig
from .prompt_bundler import BundleOptions
from .qa_generator import GENERATED_CATEGORIES, QACategory, QAConfig
from .spatial_core import DirectionScheme

DEFAULT_API_KEY_ENV = "LMM_API_KEY"
GATEWAY_KEYS = {
    "endpoint", "model", "provider", "max_retries", "timeout", "temperature", "max_output_tokens", "api_key_env",
}
LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "{extra[scene_id]} {extra[stage]} {extra[qa_id]} | <level>{message}</level>"
)


def configure_logging(level: str = "INFO", serialize: bool = False):
    """Single stderr sink; serialize=True emits one JSON record per line"""
    logger.remove()
    logger.configure(extra={"scene_id": "-", "stage": "-", "qa_id": "-"})
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT, serialize=serialize, colorize=not serialize)


@dataclass
class RunConfig:
    scenes: List[str] = field(default_factory=list)  # manifest paths or globs
    output_root: str = "runs"
    # Rendering
    resolution: int = 640
    margin_px: int = 16
    ceiling_keep_fraction: float = 0.92
    # Keyframes
    occlusion_tolerance: float = 0.15
    sample_count: int = 32
    border_margin: int = 8
    tile_w: int = 256
    tile_h: int = 246
    # QA generation
    categories: List[str] = field(default_factory=lambda: [c.value for c in GENERATED_CATEGORIES])
    items_per_category: int = 10
    base_seed: int = 0
    direction_scheme: str = DirectionScheme.FOUR_WAY.value
    min_pixel_distance: float = 20.0
    n_candidates: int = 4
    distance_metric: str = "corner"
    distance_form: str = "closest"
    distance_margin_m: float = 0.15
    min_abs_distance_m: float = 0.1
    turn_threshold_deg: float = 30.0
    route_clearance_m: float = 0.25
    route_spacing_m: float = 0.8
    route_candidates: int = 15
    route_augmentation: bool = False
    external_qa: Optional[str] = None
    # Bundling ablations
    no_metadata: bool = False
    no_filter: bool = False
    no_rotation: bool = False
    no_guide: bool = False
    keyframes_for_spatial: bool = False
    # Dispatch and evaluation
    gateway: Optional[Dict[str, Any]] = None
    concurrency: int = 4
    weighted_average: bool = False
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.scenes, str):
            self.scenes = [self.scenes]
        if self.resolution <= 2 * self.margin_px:
            raise ConfigError(f"resolution {self.resolution} leaves no room inside margin {self.margin_px}")
        if not 0.0 < self.ceiling_keep_fraction <= 1.0:
            raise ConfigError(f"ceiling_keep_fraction must be in (0, 1], got {self.ceiling_keep_fraction}")
        if self.items_per_category < 0:
            raise ConfigError("items_per_category must be >= 0")
        if self.workers < 1 or self.concurrency < 1:
            raise ConfigError("workers and concurrency must be >= 1")
        if not isinstance(self.base_seed, int) or isinstance(self.base_seed, bool):
            raise ConfigError(f"base_seed must be an integer, got {self.base_seed!r}")
        try:
            self.direction_scheme = DirectionScheme(self.direction_scheme).value
            self.categories = [QACategory(str(c).upper()).value for c in self.categories]
        except ValueError as e:
            raise ConfigError(str(e)) from e
        unknown = set(self.categories) - {c.value for c in GENERATED_CATEGORIES}
        if unknown:
            raise ConfigError(f"categories {sorted(unknown)} cannot be generated; import them with external_qa")
        # Stage parameter objects validate their own invariants
        try:
            self.qa_config()
            self.visibility_params()
        except ToolkitValidationError as e:
            raise ConfigError(str(e)) from e

    def qa_config(self) -> QAConfig:
        return QAConfig(
            direction_scheme=DirectionScheme(self.direction_scheme),
            min_pixel_distance=self.min_pixel_distance,
            bev_resolution=self.resolution,
            bev_margin_px=self.margin_px,
            n_candidates=self.n_candidates,
            distance_metric=self.distance_metric,
            distance_form=self.distance_form,
            distance_margin_m=self.distance_margin_m,
            min_abs_distance_m=self.min_abs_distance_m,
            turn_threshold_deg=self.turn_threshold_deg,
            route_clearance_m=self.route_clearance_m,
            route_spacing_m=self.route_spacing_m,
            route_candidates=self.route_candidates,
            route_augmentation=self.route_augmentation,
            ceiling_keep_fraction=self.ceiling_keep_fraction,
        )

    def visibility_params(self) -> VisibilityParams:
        return VisibilityParams(
            sample_count=self.sample_count,
            occlusion_tolerance=self.occlusion_tolerance,
            border_margin=self.border_margin,
        )

    def bundle_options(self) -> BundleOptions:
        return BundleOptions(
            use_metadata=not self.no_metadata,
            use_filter=not self.no_filter,
            use_rotation=not self.no_rotation,
            use_guide=not self.no_guide,
            keyframes_for_spatial=self.keyframes_for_spatial,
            tile_w=self.tile_w,
            tile_h=self.tile_h,
        )

    def scene_paths(self) -> List[str]:
        """Manifest paths with globs expanded, sorted and de-duplicated"""
        paths = set()
        for pattern in self.scenes:
            matches = glob.glob(pattern) if glob.has_magic(pattern) else [pattern]
            paths.update(os.path.abspath(m) for m in matches)
        return sorted(paths)

    def fingerprint(self, keys: Iterable[str]) -> str:
        """Stable hash of the named parameters, used for stage stamps"""
        values = asdict(self)
        payload = json.dumps({k: values[k] for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON run config; relative paths resolve against the config file's directory"""
    document: Dict[str, Any] = {}
    base_dir = os.getcwd()
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
        if not isinstance(document, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        base_dir = os.path.dirname(os.path.abspath(path))

    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(document) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    document = dict(document)
    if "scenes" in document:
        scenes = document["scenes"]
        scenes = [scenes] if isinstance(scenes, str) else scenes
        document["scenes"] = [os.path.join(base_dir, s) for s in scenes]
    for key in ("output_root", "external_qa"):
        if document.get(key):
            document[key] = os.path.join(base_dir, document[key])
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown override {key}")
        if value is not None:
            document[key] = value
    try:
        return RunConfig(**document)
    except TypeError as e:
        raise ConfigError(f"invalid config value: {e}") from e


def load_gateway_config(section: Optional[Dict[str, Any]], dotenv_path: Optional[str] = None) -> GatewayConfig:
    """Gateway settings from the run config; the API key comes from the environment only"""
    if not section:
        raise ConfigError("run config has no gateway section")
    if "api_key" in section:
        raise ConfigError("gateway.api_key is not allowed; set the key in the environment")
    unknown = sorted(set(section) - GATEWAY_KEYS)
    if unknown:
        raise ConfigError(f"unknown gateway keys: {', '.join(unknown)}")
    load_dotenv(dotenv_path, override=False)
    env_name = section.get("api_key_env", DEFAULT_API_KEY_ENV)
    api_key = os.environ.get(env_name, "").strip()
    if not api_key:
        raise ConfigError(f"environment variable {env_name} is not set")
    params = {k: v for k, v in section.items() if k != "api_key_env"}
    try:
        return GatewayConfig(api_key=api_key, **params)
    except TypeError as e:
        raise ConfigError(f"invalid gateway config: {e}") from e
