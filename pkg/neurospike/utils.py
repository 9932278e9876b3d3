import hashlib
import zlib
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from rich.console import Console

console = Console()


def info(message: str) -> None:
    console.print(f"[INFO] {message}", highlight=False)


def warning(message: str) -> None:
    console.print(f"[WARNING] {message}", style="yellow", highlight=False)


def error(message: str) -> None:
    console.print(f"[ERROR] {message}", style="red", highlight=False)


def rng(seed: int, *stream: str) -> np.random.Generator:
    """
    Return an independent generator for a named stream of a seed.

    The same (seed, stream) pair always yields the same sequence, and
    distinct stream names never share state.

    :param seed: The run seed.
    :param stream: Stream names, e.g. ("shuffle", "fold-3").
    :return: A numpy Generator.
    """
    keys = [zlib.crc32(name.encode("utf-8")) for name in stream]
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def find_file_same_dir(pattern: str, path=".") -> Optional[Path]:
    """
    Find the first file with the specified pattern in the given directory.

    :param pattern: The glob pattern to search for.
    :param path: The directory path to search in.
    :return: The path to the found file, or None if not found.
    """
    files = sorted(Path(path).glob(pattern))
    if files:
        return files[0]
    return None


def find_files(
    pattern: str, start_path: Path = Path(".")
) -> tuple[list[Path], Optional[Path]]:
    """
    Find all files with the specified pattern below the given directory.

    :param pattern: The pattern to search for.
    :param start_path: The directory path to search in.
    :return: The sorted list of found files and the closest one.
    """
    files = []
    closest_file = None
    closest_distance = float("inf")

    for path in sorted(start_path.rglob(pattern)):
        if "site-packages" in path.parts:
            continue
        files.append(path)
        distance = len(path.relative_to(start_path).parts)
        if distance < closest_distance:
            closest_file = path
            closest_distance = distance
    return files, closest_file


def hash_files(paths: Iterable[Path], root: Path) -> str:
    """
    Hash file names (relative to root) and contents in a stable order.

    :param paths: Files to hash.
    :param root: Directory the names are made relative to.
    :return: Hex sha256 digest.
    """
    digest = hashlib.sha256()
    for path in sorted(paths):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def hash_directory(root: Path, patterns: Iterable[str]) -> str:
    files = set()
    for pattern in patterns:
        files.update(root.rglob(pattern))
    return hash_files(files, root)
