"""
On-disk layouts.

Recordings::

    <root>/<trial_id>/data.ntsr     [19, T] float32, microvolts
    <root>/<trial_id>/trial.json    {fs, markers, participant, trial_id}

Processed datasets::

    <root>/manifest.json
    <root>/epochs/00000.ntsr        (or .spkt for spike trains)
"""

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from packaging import version
from pydantic import BaseModel, ValidationError

from neurospike import __version__
from neurospike.eeg import CHANNELS, FS, EegRecording, Epoch, Marker
from neurospike.errors import FormatError
from neurospike.storage import read_ntsr, read_spkt, write_ntsr, write_spkt
from neurospike.utils import find_files, hash_directory, warning

TRIAL_FILE = "trial.json"
DATA_FILE = "data.ntsr"
MANIFEST_FILE = "manifest.json"
EPOCH_DIR = "epochs"


class TrialInfo(BaseModel):
    fs: float = FS
    markers: list[Marker]
    participant: str = "P00"
    trial_id: str
    channels: list[str] = list(CHANNELS)
    rejected: bool = False


class EpochEntry(BaseModel):
    file: str
    label: int
    length: int
    trial_id: str = ""
    participant: str = ""


class DatasetManifest(BaseModel):
    version: str = __version__
    kind: str = "epochs"
    channels: list[str] = list(CHANNELS)
    params: dict = {}
    stages: dict = {}
    threshold: Optional[float] = None
    spike_density: Optional[float] = None
    epochs: list[EpochEntry] = []

    @property
    def labels(self) -> np.ndarray:
        return np.array([entry.label for entry in self.epochs], dtype=int)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([entry.length for entry in self.epochs], dtype=int)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def write_recording(root: Path, recording: EegRecording) -> Path:
    """Write one trial directory below ``root`` and return it."""
    trial_dir = Path(root) / recording.trial_id
    trial_dir.mkdir(parents=True, exist_ok=True)
    write_ntsr(trial_dir / DATA_FILE, recording.data)
    info = TrialInfo(
        fs=recording.fs,
        markers=recording.markers,
        participant=recording.participant,
        trial_id=recording.trial_id,
        channels=recording.channels,
        rejected=recording.rejected,
    )
    _write_json(trial_dir / TRIAL_FILE, info.model_dump(mode="json"))
    return trial_dir


def read_recording(trial_dir: Path) -> EegRecording:
    """
    :raises FormatError: When ``trial.json`` is missing or malformed, or
        the data tensor disagrees with it.
    """
    trial_dir = Path(trial_dir)
    try:
        raw = json.loads((trial_dir / TRIAL_FILE).read_text("utf-8"))
        info = TrialInfo(**raw)
    except (OSError, ValueError, TypeError, ValidationError) as exc:
        raise FormatError(
            f"'{trial_dir / TRIAL_FILE}' is not a valid trial file: {exc}"
        ) from exc
    data = read_ntsr(trial_dir / DATA_FILE)
    if data.ndim != 2 or data.shape[0] != len(info.channels):
        raise FormatError(
            f"'{trial_dir / DATA_FILE}' has shape {data.shape}, expected "
            f"[{len(info.channels)}, T]"
        )
    return EegRecording(
        data=data,
        fs=info.fs,
        markers=info.markers,
        channels=info.channels,
        participant=info.participant,
        trial_id=info.trial_id,
        rejected=info.rejected,
    )


def discover_trials(root: Path) -> list[Path]:
    """Trial directories below ``root``, in sorted order."""
    files, _ = find_files(TRIAL_FILE, Path(root))
    return [file.parent for file in files]


def write_recordings_manifest(
    root: Path, trial_ids: Sequence[str], params: dict
) -> Path:
    manifest = {
        "version": __version__,
        "kind": "recordings",
        "channels": list(CHANNELS),
        "params": params,
        "trials": list(trial_ids),
    }
    path = Path(root) / MANIFEST_FILE
    _write_json(path, manifest)
    return path


def write_manifest(root: Path, manifest: DatasetManifest) -> Path:
    path = Path(root) / MANIFEST_FILE
    _write_json(path, manifest.model_dump(mode="json"))
    return path


def write_epoch_dataset(
    root: Path,
    epochs: Iterable[Epoch],
    params: dict,
    stages: Optional[dict] = None,
) -> DatasetManifest:
    """Write normalised, padded epochs as NTSR files plus a manifest."""
    root = Path(root)
    (root / EPOCH_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for index, epoch in enumerate(epochs):
        name = f"{EPOCH_DIR}/{index:05d}.ntsr"
        write_ntsr(root / name, epoch.data)
        entries.append(
            EpochEntry(
                file=name,
                label=epoch.label,
                length=epoch.length,
                trial_id=epoch.trial_id,
                participant=epoch.participant,
            )
        )
    manifest = DatasetManifest(
        params=params, stages=stages or {}, epochs=entries
    )
    write_manifest(root, manifest)
    return manifest


def write_spike_dataset(
    root: Path,
    spikes: Sequence[np.ndarray],
    source: DatasetManifest,
    threshold: float,
) -> DatasetManifest:
    """Write SPKT spike trains that mirror the epochs of ``source``."""
    root = Path(root)
    (root / EPOCH_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (train, entry) in enumerate(zip(spikes, source.epochs)):
        name = f"{EPOCH_DIR}/{index:05d}.spkt"
        write_spkt(root / name, train)
        entries.append(entry.model_copy(update={"file": name}))
    total = sum(int(train.sum()) for train in spikes)
    size = sum(train.size for train in spikes)
    manifest = DatasetManifest(
        kind="spikes",
        channels=source.channels,
        params=source.params,
        stages=source.stages,
        threshold=threshold,
        spike_density=total / size if size else 0.0,
        epochs=entries,
    )
    write_manifest(root, manifest)
    return manifest


def read_manifest(root: Path) -> DatasetManifest:
    path = Path(root) / MANIFEST_FILE
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest(**raw)
    except (OSError, ValueError, TypeError, ValidationError) as exc:
        raise FormatError(
            f"'{path}' is not a dataset manifest: {exc}"
        ) from exc
    if version.parse(manifest.version) > version.parse(__version__):
        warning(
            f"'{path}' was written by neurospike {manifest.version}, newer "
            f"than the installed {__version__}."
        )
    return manifest


def load_dataset(
    root: Path,
) -> tuple[np.ndarray, np.ndarray, DatasetManifest]:
    """
    Load every epoch of a processed dataset.

    :return: Stacked epochs [n, C, L] (float32, or uint8 for spike
        trains), labels [n] and the manifest.
    """
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.kind not in ("epochs", "spikes"):
        raise FormatError(
            f"'{root}' holds {manifest.kind}, not a processed dataset"
        )
    if not manifest.epochs:
        raise FormatError(f"'{root}' contains no epochs")
    reader = read_spkt if manifest.kind == "spikes" else read_ntsr
    arrays = [reader(root / entry.file) for entry in manifest.epochs]
    shapes = {array.shape for array in arrays}
    if len(shapes) != 1:
        raise FormatError(f"'{root}' mixes epoch shapes {sorted(shapes)}")
    return np.stack(arrays), manifest.labels, manifest


def dataset_hash(root: Path) -> str:
    return hash_directory(
        Path(root), [MANIFEST_FILE, "*.ntsr", "*.spkt", TRIAL_FILE]
    )
