"""
===============================================================================
Project   : mvprompt
Module    : app/services/dataset_service.py
Created   : 2025-11-08
Author    : Florian
Purpose   : Reads and writes datasets: JSON Lines instance files and JSON
            category lists.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import json
import logging
from collections.abc import Iterable
from pathlib import Path

from pydantic import ValidationError

from app.core.errors import DatasetError
from app.core.schemas import CategorySet, Instance, SentimentTuple, Task

logger = logging.getLogger(__name__)


def load_instances(path: Path, task: Task) -> list[Instance]:
    """
    Loads a JSON Lines dataset.

    Each non-empty line is {"id", "text", "tuples": [{"at", "ac", "ot", "p"}]};
    "tuples" may be omitted for unlabelled instances.

    Args:
        path (Path): The dataset file.
        task (Task): Task the tuples must fit.

    Returns:
        list[Instance]: Instances in file order.

    Raises:
        DatasetError: On unreadable files, malformed lines, duplicate ids or
            tuples that do not fit the task.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read dataset {path}: {e}")

    instances: list[Instance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            gold = None
            if row.get("tuples") is not None:
                gold = tuple(SentimentTuple.from_json(t) for t in row["tuples"])
            instance = Instance(id=str(row["id"]), text=row["text"], gold=gold)
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValidationError) as e:
            raise DatasetError(f"{path}:{lineno}: malformed instance ({e})")

        if instance.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate instance id '{instance.id}'")
        for t in instance.gold or ():
            if not t.fits(task):
                raise DatasetError(f"{path}:{lineno}: tuple {t.to_json()} does not fit {task.kind.value}")
        seen.add(instance.id)
        instances.append(instance)

    logger.debug(f"[Dataset] Loaded {len(instances)} instances from {path}")
    return instances


def load_categories(path: Path) -> CategorySet:
    """Loads a JSON array of category names."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return CategorySet(categories=tuple(data))
    except (OSError, json.JSONDecodeError, TypeError, ValidationError) as e:
        raise DatasetError(f"Invalid category file {path}: {e}")


def instance_to_json(instance: Instance) -> dict:
    row = {"id": instance.id, "text": instance.text}
    if instance.gold is not None:
        row["tuples"] = [t.to_json() for t in instance.gold]
    return row


def write_instances(path: Path, instances: Iterable[Instance]) -> Path:
    """Writes instances as JSON Lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance_to_json(instance), ensure_ascii=False) + "\n")
    return path


def write_categories(path: Path, categories: CategorySet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(categories.categories), ensure_ascii=False) + "\n", encoding="utf-8")
    return path
