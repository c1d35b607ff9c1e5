"""Problem generation, the PGMD dataset container and its audit.

A dataset directory holds, per split, a binary `{split}.pgmd` file and a
JSON-lines sidecar `{split}.jsonl`, plus `split.json` with the structure
filters used. Binary layout, all little-endian:

    b"PGMD" | version u16 | resolution u16 | count u32
    per record:
        16 * resolution**2 bytes   context panels 0..7 then choices 0..7
        target u8
        triple count u8, then 3 code bytes per triple
        regime u8

Every problem draws from its own stream seeded by (seed, split, index), so
records do not depend on how generation is scheduled across workers.
"""

import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from ravenforge.errors import ContractError, FormatError, GenerationError, ParameterError
from ravenforge.lib.tensor import default_dtype
from ravenforge.pgm.choices import generate_choices
from ravenforge.pgm.grid import realize_grid
from ravenforge.pgm.panels import PanelSpec
from ravenforge.pgm.render import RESOLUTIONS, render_panels
from ravenforge.pgm.rules import check_rules
from ravenforge.pgm.splits import Regime, make_split
from ravenforge.pgm.structures import Structure, StructureFilter, Triple, sample_structure

logger = logging.getLogger(__name__)

MAGIC = b"PGMD"
VERSION = 1
HEADER = struct.Struct("<HHI")
SPLITS = ("train", "val", "test")
N_PANELS = 16
# Stream key for the split filters, outside the per-split keys 0..2.
_FILTER_STREAM = len(SPLITS)


@dataclass(frozen=True)
class Problem:
    """One matrix problem with its rasters."""

    context: tuple[PanelSpec, ...]
    choices: tuple[PanelSpec, ...]
    target: int
    structure: Structure
    panels: np.ndarray
    regime: Regime = Regime.NEUTRAL

    def to_record(self) -> bytes:
        codes = b"".join(bytes(t.codes) for t in self.structure.triples)
        return (
            self.panels.astype(np.uint8).tobytes()
            + struct.pack("<BB", self.target, len(self.structure))
            + codes
            + struct.pack("<B", self.regime.code)
        )

    def to_metadata(self, seed: int, split: str, index: int) -> dict[str, Any]:
        return {
            "index": index,
            "seed": seed,
            "split": split,
            "regime": self.regime.value,
            "target": self.target,
            "structure": self.structure.to_list(),
            "context": [panel.to_dict() for panel in self.context],
            "choices": [panel.to_dict() for panel in self.choices],
        }


def problem_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, SPLITS.index(split), index)))


def filter_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _FILTER_STREAM)))


def count_passing(
    structure: Structure, context: tuple[PanelSpec, ...], choices: tuple[PanelSpec, ...]
) -> list[int]:
    """Indices of the choices that satisfy `structure` when placed in the last grid slot."""
    return [i for i, choice in enumerate(choices) if check_rules(structure, context + (choice,))]


def generate_problem(
    rng: np.random.Generator,
    allowed: StructureFilter | None = None,
    regime: Regime = Regime.NEUTRAL,
    resolution: int = 40,
    max_retries: int = 100,
) -> Problem:
    """Sample a structure admitted by `allowed` and build a problem with a unique answer.

    Raises:
        GenerationError: If no problem can be built within `max_retries` structures
        ContractError: If a finished problem does not have exactly one valid choice
    """
    for attempt in range(max_retries):
        structure = sample_structure(rng, allowed)
        try:
            grid = realize_grid(structure, rng)
            choices, target = generate_choices(grid, structure, rng, resolution=resolution)
        except GenerationError as exc:
            logger.debug("Attempt %d for %s failed: %s", attempt, structure, exc)
            continue
        context = tuple(grid[:8])
        passing = count_passing(structure, context, choices)
        if passing != [target]:
            raise ContractError(f"{structure}: choices {passing} pass, expected only {target}")
        panels = render_panels(context + choices, resolution)
        return Problem(context, choices, target, structure, panels, Regime(regime))
    raise GenerationError(f"no problem generated in {max_retries} structure draws")


def _generate_record(
    job: tuple[int, str, int, StructureFilter, Regime, int],
) -> tuple[bytes, dict[str, Any]]:
    seed, split, index, allowed, regime, resolution = job
    problem = generate_problem(problem_rng(seed, split, index), allowed, regime, resolution)
    return problem.to_record(), problem.to_metadata(seed, split, index)


def _header(resolution: int, count: int) -> bytes:
    return MAGIC + HEADER.pack(VERSION, resolution, count)


def build_dataset(
    regime: Regime,
    counts: dict[str, int],
    resolution: int,
    seed: int,
    out_dir: Path,
    workers: int = 1,
) -> dict[str, Path]:
    """Generate the train/val/test splits of a regime into `out_dir`.

    Args:
        regime: Generalization regime deciding the structure filters
        counts: Number of problems per split, keyed by "train", "val" and "test"
        resolution: Panel size in pixels (40 or 80)
        seed: Root seed; equal seeds give byte-identical files
        out_dir: Directory to write into (created if missing)
        workers: Worker processes; records are assembled in index order either way

    Returns:
        Mapping of split name to its `.pgmd` path

    Raises:
        ParameterError: If a count is not positive or the resolution is unsupported
        OSError: If the files cannot be written
    """
    regime = Regime(regime)
    if resolution not in RESOLUTIONS:
        raise ParameterError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    for split in SPLITS:
        if counts.get(split, 0) <= 0:
            raise ParameterError(
                f"count for split '{split}' must be positive, got {counts.get(split)}"
            )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    filters = dict(zip(SPLITS, make_split(regime, filter_rng(seed))))
    paths: dict[str, Path] = {}
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for split in SPLITS:
            jobs = [
                (seed, split, i, filters[split], regime, resolution) for i in range(counts[split])
            ]
            if executor:
                results = executor.map(_generate_record, jobs, chunksize=16)
            else:
                results = map(_generate_record, jobs)
            path = out_dir / f"{split}.pgmd"
            with path.open("wb") as binary, (out_dir / f"{split}.jsonl").open("w") as sidecar:
                binary.write(_header(resolution, counts[split]))
                for record, metadata in results:
                    binary.write(record)
                    sidecar.write(json.dumps(metadata, sort_keys=True) + "\n")
            logger.info("Wrote %d %s problems to %s", counts[split], split, path)
            paths[split] = path
    finally:
        if executor:
            executor.shutdown()

    split_info = {
        "regime": regime.value,
        "seed": seed,
        "resolution": resolution,
        "counts": {split: counts[split] for split in SPLITS},
        "filters": {split: filters[split].to_dict() for split in SPLITS},
    }
    (out_dir / "split.json").write_text(json.dumps(split_info, sort_keys=True, indent=2))
    return paths


@dataclass
class PgmDataset:
    """Problems of one split, loaded from a `.pgmd` file."""

    panels: np.ndarray  # (n, 16, H, W) uint8
    targets: np.ndarray  # (n,) int64
    structures: list[Structure]
    regimes: list[Regime]
    resolution: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def regime(self) -> Regime:
        return self.regimes[0]

    def images(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Panels scaled to [0, 1] in the default precision, shape (n, 16, H, W)."""
        panels = self.panels if indices is None else self.panels[indices]
        return panels.astype(default_dtype()) / 255.0

    def subset(self, indices: np.ndarray) -> "PgmDataset":
        indices = np.asarray(indices)
        return PgmDataset(
            panels=self.panels[indices],
            targets=self.targets[indices],
            structures=[self.structures[int(i)] for i in indices],
            regimes=[self.regimes[int(i)] for i in indices],
            resolution=self.resolution,
            split=self.split,
        )

    def batches(
        self, batch_size: int, rng: np.random.Generator | None = None
    ) -> Iterator[np.ndarray]:
        """Index batches over the problems, shuffled when `rng` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]


def _read_exact(blob: memoryview, offset: int, size: int, path: Path) -> tuple[memoryview, int]:
    if offset + size > len(blob):
        raise FormatError(f"{path}: truncated at byte {offset}, wanted {size} more")
    return blob[offset : offset + size], offset + size


def load_dataset(directory: Path, split: str = "train") -> PgmDataset:
    """Read one split of a dataset directory.

    Raises:
        FormatError: If the file has the wrong magic, version or length
        OSError: If the file cannot be read
    """
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}, got '{split}'")
    path = Path(directory) / f"{split}.pgmd"
    blob = memoryview(path.read_bytes())
    magic, offset = _read_exact(blob, 0, len(MAGIC), path)
    if bytes(magic) != MAGIC:
        raise FormatError(f"{path}: bad magic {bytes(magic)!r}")
    header, offset = _read_exact(blob, offset, HEADER.size, path)
    version, resolution, count = HEADER.unpack(header)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")

    panel_bytes = N_PANELS * resolution * resolution
    panels = np.empty((count, N_PANELS, resolution, resolution), dtype=np.uint8)
    targets = np.empty(count, dtype=np.int64)
    structures: list[Structure] = []
    regimes: list[Regime] = []
    for i in range(count):
        raw, offset = _read_exact(blob, offset, panel_bytes, path)
        panels[i] = np.frombuffer(raw, dtype=np.uint8).reshape(N_PANELS, resolution, resolution)
        fields, offset = _read_exact(blob, offset, 2, path)
        target, n_triples = struct.unpack("<BB", fields)
        codes, offset = _read_exact(blob, offset, 3 * n_triples, path)
        regime_code, offset = _read_exact(blob, offset, 1, path)
        try:
            triples = tuple(
                Triple.from_codes(tuple(codes[j : j + 3])) for j in range(0, len(codes), 3)
            )
            structures.append(Structure(triples))
            regimes.append(list(Regime)[regime_code[0]])
        except (IndexError, ContractError) as exc:
            raise FormatError(f"{path}: record {i} has an invalid structure: {exc}") from exc
        targets[i] = target
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after {count} records")
    return PgmDataset(panels, targets, structures, regimes, resolution, split)


@dataclass
class AuditResult:
    problems: int = 0
    uniqueness_failures: list[tuple[str, int]] = field(default_factory=list)
    filter_violations: list[tuple[str, int]] = field(default_factory=list)
    raster_mismatches: list[tuple[str, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.uniqueness_failures or self.filter_violations or self.raster_mismatches)


def audit_dataset(directory: Path) -> AuditResult:
    """Re-check every stored problem from its JSON-lines metadata.

    Confirms that exactly the stored target passes the rule checker, that the
    structure is admitted by its split's filter, and that re-rendering the
    panel specs reproduces the stored rasters.
    """
    directory = Path(directory)
    info = json.loads((directory / "split.json").read_text())
    result = AuditResult()
    for split in SPLITS:
        allowed = StructureFilter.from_dict(info["filters"][split])
        dataset = load_dataset(directory, split)
        with (directory / f"{split}.jsonl").open() as sidecar:
            for line in sidecar:
                meta = json.loads(line)
                index = meta["index"]
                structure = Structure.from_list(meta["structure"])
                context = tuple(PanelSpec.from_dict(p) for p in meta["context"])
                choices = tuple(PanelSpec.from_dict(p) for p in meta["choices"])
                result.problems += 1
                if count_passing(structure, context, choices) != [meta["target"]]:
                    result.uniqueness_failures.append((split, index))
                if not allowed(structure):
                    result.filter_violations.append((split, index))
                rendered = render_panels(context + choices, dataset.resolution)
                if not np.array_equal(rendered, dataset.panels[index]):
                    result.raster_mismatches.append((split, index))
    if not result.ok:
        logger.warning(
            "Audit of %s: %d uniqueness failures, %d filter violations, %d raster mismatches",
            directory,
            len(result.uniqueness_failures),
            len(result.filter_violations),
            len(result.raster_mismatches),
        )
    return result
