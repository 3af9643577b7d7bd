"""Pipeline configuration: parsing, validation with line locations, canonical form."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .arbitrage import ChatTemplate
from .judge import DEFAULT_TEMPLATE, PLACEHOLDERS
from .languages import SHARED_LANGUAGES, SUPPORTED_LANGUAGES
from .merge import MergeRecipe, RecipeError
from .prefs import DEFAULT_ITERATIONS, MAX_ITERATIONS


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        where = ""
        if source or line:
            where = f"{source or '<config>'}" + (f":{line}" if line else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class Cluster:
    name: str
    languages: tuple[str, ...]


@dataclass(frozen=True)
class ClusterConfig:
    clusters: tuple[Cluster, ...] = ()
    shared_languages: tuple[str, ...] = SHARED_LANGUAGES

    def to_dict(self) -> dict:
        return {
            "shared_languages": list(self.shared_languages),
            "clusters": [{"name": c.name, "languages": list(c.languages)} for c in self.clusters],
        }

    def get(self, name: str) -> Cluster:
        for c in self.clusters:
            if c.name == name:
                return c
        raise KeyError(name)


class ClusterError(ValueError):
    def __init__(self, message: str, cluster: str | None = None, language: str | None = None):
        self.cluster = cluster
        self.language = language
        super().__init__(message)


def validate_clusters(cfg: ClusterConfig, supported=SUPPORTED_LANGUAGES) -> None:
    """Every cluster must contain every shared language; all languages must be supported."""
    for lang in cfg.shared_languages:
        if lang not in supported:
            raise ClusterError(f"shared language {lang!r} is not supported", None, lang)
    names = [c.name for c in cfg.clusters]
    if len(set(names)) != len(names):
        raise ClusterError(f"duplicate cluster names: {names}")
    for c in cfg.clusters:
        for lang in c.languages:
            if lang not in supported:
                raise ClusterError(f"cluster {c.name!r}: unsupported language {lang!r}", c.name, lang)
        for lang in cfg.shared_languages:
            if lang not in c.languages:
                raise ClusterError(f"cluster {c.name!r} is missing shared language {lang!r}", c.name, lang)


@dataclass(frozen=True)
class EndpointSpec:
    url: str
    model_id: str | None = None
    temperature: float = 0.7
    max_tokens: int = 512
    mock: Mapping[str, Any] | None = None

    def to_dict(self) -> dict:
        d: dict = {"url": self.url}
        if self.model_id is not None:
            d.update(model_id=self.model_id, temperature=self.temperature, max_tokens=self.max_tokens)
        if self.mock is not None:
            d["mock"] = dict(self.mock)
        return d


STAGE_TYPES = ("arbitrage", "merge", "prefs_offline", "prefs_online", "dpo", "eval")

# stage type -> (required fields, optional fields with defaults)
STAGE_FIELDS: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "arbitrage": (("prompts",), {"cluster": None}),
    "merge": (("recipe",), {}),
    "prefs_offline": ((), {"from": None}),
    "prefs_online": (("iteration", "m"), {"n_iterations": DEFAULT_ITERATIONS, "beta": 0.1, "prompts": None,
                                          "max_iterations": MAX_ITERATIONS}),
    "dpo": ((), {"from": None, "beta": 0.1, "learning_rate": 0.05, "steps": 50}),
    "eval": (("prompts", "candidate", "baseline"), {"languages": ["en"], "judge_template": None,
                                                     "both_orders": True}),
}


@dataclass(frozen=True)
class StageSpec:
    type: str
    name: str
    params: Mapping[str, Any]
    line: int | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {"type": self.type, "name": self.name, **self.params}


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageSpec, ...]
    seed: int = 0
    max_inflight: int = 4
    languages: tuple[str, ...] = SUPPORTED_LANGUAGES
    clusters: ClusterConfig = ClusterConfig()
    generators: tuple[EndpointSpec, ...] = ()
    endpoints: Mapping[str, EndpointSpec] = field(default_factory=dict)
    checkpoints: Mapping[str, str] = field(default_factory=dict)
    chat_template: ChatTemplate = ChatTemplate()
    base_dir: Path = field(default=Path("."), compare=False)

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        tpl = self.chat_template
        return {
            "seed": self.seed,
            "max_inflight": self.max_inflight,
            "languages": list(self.languages),
            "clusters": self.clusters.to_dict(),
            "chat_template": {k: getattr(tpl, k) for k in
                              ("user_open", "user_close", "chatbot_open", "chatbot_close", "turn_separator")},
            "endpoints": {
                "generators": [g.to_dict() for g in self.generators],
                **{k: v.to_dict() for k, v in sorted(self.endpoints.items())},
            },
            "checkpoints": dict(sorted(self.checkpoints.items())),
            "stages": [s.to_dict() for s in self.stages],
        }


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, allow_unicode=True, default_flow_style=False)


class _Lines:
    """Map key paths in a YAML document to 1-based line numbers."""

    def __init__(self, node):
        self.lines: dict[tuple, int] = {}
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                self.lines[path + (key,)] = k.start_mark.line + 1
                self._walk(v, path + (key,))
                self.lines[path + (key,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def __call__(self, *path) -> int | None:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)


def parse_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", source=str(path))
    text = path.read_text(encoding="utf-8")
    return parse_config_text(text, base_dir=path.parent, source=str(path))


def parse_config_text(text: str, base_dir: Path | str = ".", source: str | None = None) -> PipelineConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", mark.line + 1 if mark else None, source) from None
    at = _Lines(node)

    def fail(msg, *p):
        raise ConfigError(msg, at(*p), source)

    if not isinstance(raw, dict):
        fail("config must be a mapping")
    known = {"seed", "max_inflight", "languages", "clusters", "chat_template", "endpoints", "checkpoints", "stages"}
    for k in raw:
        if k not in known:
            fail(f"unknown top-level field {k!r}", k)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        fail("seed must be an unsigned 64-bit integer", "seed")
    max_inflight = raw.get("max_inflight", 4)
    if not isinstance(max_inflight, int) or max_inflight < 1:
        fail("max_inflight must be a positive integer", "max_inflight")

    languages = raw.get("languages", list(SUPPORTED_LANGUAGES))
    if not isinstance(languages, list) or not languages:
        fail("languages must be a non-empty list", "languages")
    for i, lang in enumerate(languages):
        if lang not in SUPPORTED_LANGUAGES:
            fail(f"unsupported language {lang!r}", "languages", i)

    clusters = _parse_clusters(raw.get("clusters"), fail, languages)
    chat_template = _parse_template(raw.get("chat_template"), fail)
    generators, endpoints = _parse_endpoints(raw.get("endpoints", {}), fail)

    checkpoints = raw.get("checkpoints", {}) or {}
    if not isinstance(checkpoints, dict) or not all(isinstance(v, str) for v in checkpoints.values()):
        fail("checkpoints must map names to file paths", "checkpoints")

    stages = _parse_stages(raw.get("stages"), fail, at, clusters, generators, endpoints, checkpoints)
    return PipelineConfig(
        stages=stages, seed=seed, max_inflight=max_inflight, languages=tuple(languages), clusters=clusters,
        generators=generators, endpoints=endpoints, checkpoints=dict(checkpoints), chat_template=chat_template,
        base_dir=Path(base_dir),
    )


def _parse_clusters(raw, fail, languages) -> ClusterConfig:
    if raw is None:
        return ClusterConfig()
    if not isinstance(raw, dict):
        fail("clusters must be a mapping", "clusters")
    shared = raw.get("shared_languages", list(SHARED_LANGUAGES))
    items = raw.get("clusters", [])
    if not isinstance(items, list):
        fail("clusters.clusters must be a list", "clusters", "clusters")
    clusters = []
    for i, c in enumerate(items):
        if not isinstance(c, dict) or "name" not in c or "languages" not in c:
            fail("each cluster needs 'name' and 'languages'", "clusters", "clusters", i)
        clusters.append(Cluster(str(c["name"]), tuple(c["languages"])))
    cfg = ClusterConfig(tuple(clusters), tuple(shared))
    try:
        validate_clusters(cfg, supported=languages)
    except ClusterError as e:
        idx = next((i for i, c in enumerate(clusters) if c.name == e.cluster), None)
        if idx is None:
            fail(str(e), "clusters", "shared_languages")
        fail(str(e), "clusters", "clusters", idx, "languages")
    return cfg


def _parse_template(raw, fail) -> ChatTemplate:
    if raw is None:
        return ChatTemplate()
    if not isinstance(raw, dict):
        fail("chat_template must be a mapping", "chat_template")
    try:
        return ChatTemplate(**raw)
    except (TypeError, ValueError) as e:
        fail(f"chat_template: {e}", "chat_template")


def _endpoint(raw, fail, *path, generator=False) -> EndpointSpec:
    if not isinstance(raw, dict) or "url" not in raw:
        fail("endpoint needs a 'url'", *path)
    allowed = {"url", "model_id", "temperature", "max_tokens", "mock"}
    extra = set(raw) - allowed
    if extra:
        fail(f"unknown endpoint field(s): {', '.join(sorted(extra))}", *path, sorted(extra)[0])
    if generator and not raw.get("model_id"):
        fail("generator endpoint needs a 'model_id'", *path)
    mock = raw.get("mock")
    if mock is not None and (not isinstance(mock, dict) or "kind" not in mock):
        fail("mock must be a mapping with a 'kind'", *path, "mock")
    return EndpointSpec(raw["url"], raw.get("model_id"), float(raw.get("temperature", 0.7)),
                        int(raw.get("max_tokens", 512)), mock)


ENDPOINT_ROLES = ("reward", "policy", "judge", "translate", "baseline")


def _parse_endpoints(raw, fail):
    if not isinstance(raw, dict):
        fail("endpoints must be a mapping", "endpoints")
    gens = raw.get("generators", []) or []
    if not isinstance(gens, list):
        fail("endpoints.generators must be a list", "endpoints", "generators")
    generators = tuple(_endpoint(g, fail, "endpoints", "generators", i, generator=True) for i, g in enumerate(gens))
    ids = [g.model_id for g in generators]
    for i, mid in enumerate(ids):
        if ids.index(mid) != i:
            fail(f"duplicate generator model_id {mid!r}", "endpoints", "generators", i)
    roles = {}
    for k, v in raw.items():
        if k == "generators":
            continue
        if k not in ENDPOINT_ROLES:
            fail(f"unknown endpoint role {k!r}; expected generators or one of {', '.join(ENDPOINT_ROLES)}", "endpoints", k)
        roles[k] = _endpoint(v, fail, "endpoints", k, generator=k in ("policy", "baseline"))
    return generators, roles


def _parse_stages(raw, fail, at, clusters, generators, endpoints, checkpoints) -> tuple[StageSpec, ...]:
    if not isinstance(raw, list) or not raw:
        fail("stages must be a non-empty list", "stages")
    stages: list[StageSpec] = []
    seen_types: list[str] = []
    online_iters: list[int] = []
    ckpt_stages: set[str] = set()
    for i, s in enumerate(raw):
        loc = ("stages", i)
        if not isinstance(s, dict):
            fail("stage must be a mapping", *loc)
        stype = s.get("type")
        if stype is None:
            fail("missing required field 'type'", *loc)
        if stype not in STAGE_TYPES:
            fail(f"unknown stage type {stype!r}; expected one of {', '.join(STAGE_TYPES)}", *loc, "type")
        name = s.get("name", f"{stype}-{i}")
        if not isinstance(name, str) or not name or "/" in name:
            fail("stage name must be a non-empty string without '/'", *loc, "name")
        if any(st.name == name for st in stages):
            fail(f"duplicate stage name {name!r}", *loc, "name")
        required, optional = STAGE_FIELDS[stype]
        for r in required:
            if r not in s:
                fail(f"stage {name!r}: missing required field {r!r}", *loc)
        for k in s:
            if k not in ("type", "name") and k not in required and k not in optional:
                fail(f"stage {name!r}: unknown field {k!r}", *loc, k)
        params = {**optional, **{k: v for k, v in s.items() if k not in ("type", "name")}}
        params = {k: v for k, v in params.items() if v is not None}

        if stype == "arbitrage":
            if not generators:
                fail(f"stage {name!r}: arbitrage needs endpoints.generators", *loc)
            if "reward" not in endpoints:
                fail(f"stage {name!r}: arbitrage needs endpoints.reward", *loc)
            if "cluster" in params:
                try:
                    clusters.get(params["cluster"])
                except KeyError:
                    fail(f"stage {name!r}: unknown cluster {params['cluster']!r}", *loc, "cluster")
        elif stype == "merge":
            try:
                recipe = MergeRecipe.from_dict(params["recipe"])
            except (RecipeError, TypeError) as e:
                fail(f"stage {name!r}: invalid recipe: {e}", *loc, "recipe")
            for ref in recipe.refs():
                if ref.startswith("stage:"):
                    if ref[6:] not in ckpt_stages:
                        fail(f"stage {name!r}: {ref} does not name an earlier merge or dpo stage", *loc, "recipe")
                elif ref not in checkpoints:
                    fail(f"stage {name!r}: unknown checkpoint {ref!r}", *loc, "recipe")
            params["recipe"] = dict(params["recipe"])
            ckpt_stages.add(name)
        elif stype == "prefs_offline":
            if "from" not in params and "arbitrage" not in seen_types:
                fail(f"stage {name!r}: offline preferences need an earlier arbitrage stage", *loc)
        elif stype == "prefs_online":
            if "prefs_offline" not in seen_types:
                fail(f"stage {name!r}: online preference stage must come after the offline preference stage", *loc)
            if "policy" not in endpoints or "reward" not in endpoints:
                fail(f"stage {name!r}: online rounds need endpoints.policy and endpoints.reward", *loc)
            it = params["iteration"]
            expected = (online_iters[-1] + 1) if online_iters else 1
            if it != expected:
                fail(f"stage {name!r}: online iteration {it} out of order (expected {expected})", *loc, "iteration")
            if it > params["n_iterations"]:
                fail(f"stage {name!r}: iteration {it} exceeds n_iterations={params['n_iterations']}", *loc, "iteration")
            if params["m"] < 2:
                fail(f"stage {name!r}: m must be >= 2", *loc, "m")
            if "prompts" not in params and "arbitrage" not in seen_types:
                fail(f"stage {name!r}: needs 'prompts' or an earlier arbitrage stage", *loc)
            online_iters.append(it)
        elif stype == "dpo":
            if "from" not in params and not {"prefs_offline", "prefs_online"} & set(seen_types):
                fail(f"stage {name!r}: dpo needs an earlier preference stage", *loc)
            for k in ("beta", "learning_rate"):
                if not params[k] > 0:
                    fail(f"stage {name!r}: {k} must be positive", *loc, k)
            ckpt_stages.add(name)
        elif stype == "eval":
            for role in ("judge",):
                if role not in endpoints:
                    fail(f"stage {name!r}: eval needs endpoints.{role}", *loc)
            for k in ("candidate", "baseline"):
                ref = params[k]
                if ref not in endpoints and ref not in {g.model_id for g in generators}:
                    fail(f"stage {name!r}: {k} {ref!r} is not a configured generator or endpoint", *loc, k)
            langs = params["languages"]
            if any(lang != "en" for lang in langs) and "translate" not in endpoints:
                fail(f"stage {name!r}: non-English evaluation needs endpoints.translate", *loc, "languages")
            tpl = params.get("judge_template")
            if tpl is not None and any(tpl.count(ph) != 1 for ph in PLACEHOLDERS):
                fail(f"stage {name!r}: judge_template must contain each placeholder exactly once", *loc, "judge_template")
        if "from" in params and stype in ("prefs_offline", "dpo"):
            if not any(st.name == params["from"] for st in stages):
                fail(f"stage {name!r}: 'from' names unknown earlier stage {params['from']!r}", *loc, "from")
        seen_types.append(stype)
        stages.append(StageSpec(stype, name, params, at(*loc)))
    return tuple(stages)


__all__ = [
    "Cluster", "ClusterConfig", "ClusterError", "ConfigError", "EndpointSpec", "PipelineConfig", "StageSpec",
    "DEFAULT_TEMPLATE", "dump_config", "parse_config", "parse_config_text", "validate_clusters",
]
