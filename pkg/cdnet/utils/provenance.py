"""Provenance records written next to every command's outputs"""

import hashlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from cdnet.utils.config_parser import ConfigParser

RUN_RECORD = 'run.json'


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def hash_artifacts(out_dir: Path) -> Dict[str, str]:
    """Map every file under out_dir (except run records) to its sha256"""
    out_dir = Path(out_dir)
    hashes = {}
    for path in sorted(out_dir.rglob('*')):
        if path.is_file() and path.name != RUN_RECORD and not path.name.endswith('.backup'):
            hashes[path.relative_to(out_dir).as_posix()] = file_sha256(path)
    return hashes


def write_run_record(out_dir: Path, command: str, config: Dict[str, Any],
                     seed: Union[int, List[int], None],
                     config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Write run.json: command, config echo, seed and artifact hashes.
    No timestamps, so identical runs produce identical records.
    """
    record = {
        'command': command,
        'config': config,
        'config_path': str(config_path) if config_path else None,
        'seed': seed,
        'artifacts': hash_artifacts(out_dir),
    }
    ok, error = ConfigParser(Path(out_dir) / RUN_RECORD).write_config(record)
    if not ok:
        raise OSError(error)
    return record
