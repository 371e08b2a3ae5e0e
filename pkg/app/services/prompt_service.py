"""
===============================================================================
Project   : mvprompt
Module    : app/services/prompt_service.py
Created   : 2025-11-07
Author    : Florian
Purpose   : Renders view prompts: element descriptions, output format for the
            view's permutation, few-shot demonstrations and the input block.
            The prompt is split into a prefix shared by all instances of a
            view and a per-instance suffix.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import hashlib
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

from jinja2 import Template, TemplateError

from app.core.deps import PROMPTS_DIR, prompt_environment
from app.core.errors import ConfigError, MalformedDemonstrationError
from app.core.schemas import CategorySet, ElementKind, Instance, Permutation
from app.services.grammar_service import format_tuples

logger = logging.getLogger(__name__)

DESCRIPTIONS_FILE = "element_descriptions.json"
PREFIX_TEMPLATE = "prefix.j2"


@dataclass(frozen=True)
class PromptTemplate:
    """
    Loaded prompt template.

    Attributes:
        instruction (str): Opening instruction line.
        element_names (Mapping[ElementKind, str]): Display name per element.
        element_descriptions (Mapping[ElementKind, str]): Definition per element.
        prefix_template (Template): Jinja2 template of the shared prefix.
        input_label (str): Label in front of every input sentence.
        marker (str): Trailing marker after the input sentence.
    """
    instruction: str
    element_names: Mapping[ElementKind, str]
    element_descriptions: Mapping[ElementKind, str]
    prefix_template: Template
    input_label: str = "Text: "
    marker: str = "Sentiment elements:"

    @classmethod
    def load(cls, template_dir: Optional[Path] = None) -> "PromptTemplate":
        """
        Loads the template files from a directory.

        Args:
            template_dir (Optional[Path]): Directory with element_descriptions.json
                and prefix.j2. Defaults to the shipped prompts/ directory.

        Returns:
            PromptTemplate: The loaded template.

        Raises:
            ConfigError: If a file is missing or malformed.
        """
        directory = Path(template_dir) if template_dir is not None else PROMPTS_DIR
        try:
            data = json.loads((directory / DESCRIPTIONS_FILE).read_text(encoding="utf-8"))
            elements = {ElementKind(code): entry for code, entry in data["elements"].items()}
            template = prompt_environment(str(directory)).get_template(PREFIX_TEMPLATE)
        except (OSError, json.JSONDecodeError, KeyError, ValueError, TemplateError) as e:
            raise ConfigError(f"Invalid prompt template directory {directory}: {e}")

        missing = [e.value for e in ElementKind if e not in elements]
        if missing:
            raise ConfigError(f"{DESCRIPTIONS_FILE} lacks descriptions for {missing}")
        logger.debug(f"[Prompt] Loaded template from {directory}")
        return cls(
            instruction=data.get("instruction", ""),
            element_names={k: v["name"] for k, v in elements.items()},
            element_descriptions={k: v["description"] for k, v in elements.items()},
            prefix_template=template,
            input_label=data.get("input_label", "Text: "),
            marker=data.get("marker", "Sentiment elements:"),
        )


@dataclass(frozen=True)
class RenderedPrompt:
    """
    A prompt split at the input sentence.

    Attributes:
        prefix (str): Everything before the input sentence.
        suffix (str): Input sentence and marker.
        permutation_id (str): View the prompt was rendered for.
        shot_k (int): Number of demonstrations.
    """
    prefix: str
    suffix: str
    permutation_id: str
    shot_k: int

    @property
    def text(self) -> str:
        return self.prefix + self.suffix

    @cached_property
    def prefix_hash(self) -> str:
        return hashlib.sha256(self.prefix.encode("utf-8")).hexdigest()


def render_prefix(template: PromptTemplate, permutation: Permutation, shots: Sequence[Instance],
                  categories: Optional[CategorySet] = None) -> str:
    """
    Renders the shared prompt prefix of a view.

    Demonstration labels are the gold tuples in the grammar's surface form,
    ordered by the permutation. The category list, when given, is rendered once
    after the element definitions. The prefix ends with the input label.

    Raises:
        MalformedDemonstrationError: If a demonstration has no gold tuples.
    """
    demonstrations = []
    for shot in shots:
        if shot.gold is None:
            raise MalformedDemonstrationError(f"Demonstration '{shot.id}' carries no gold labels")
        demonstrations.append({"text": shot.text, "label": format_tuples(shot.gold, permutation)})

    body = template.prefix_template.render(
        instruction=template.instruction,
        elements=[
            {"name": template.element_names[kind], "description": template.element_descriptions[kind]}
            for kind in permutation.order
        ],
        slots=", ".join(template.element_names[kind] for kind in permutation.order),
        demonstrations=demonstrations,
        categories=list(categories.categories) if categories is not None else [],
    )
    return body + template.input_label


def render_suffix(template: PromptTemplate, instance: Instance) -> str:
    return f"{instance.text}\n{template.marker}"


def render(template: PromptTemplate, permutation: Permutation, shots: Sequence[Instance],
           instance: Instance, categories: Optional[CategorySet] = None) -> RenderedPrompt:
    """
    Renders the prompt of one instance under one view.

    Args:
        template (PromptTemplate): The prompt template.
        permutation (Permutation): Element order of the view.
        shots (Sequence[Instance]): Demonstrations, in sampling order.
        instance (Instance): The input instance.
        categories (Optional[CategorySet]): Category list shown in the prefix.

    Returns:
        RenderedPrompt: Prefix (shared by all instances of the view) and suffix.

    Raises:
        MalformedDemonstrationError: If a demonstration has no gold tuples.
    """
    return RenderedPrompt(
        prefix=render_prefix(template, permutation, shots, categories),
        suffix=render_suffix(template, instance),
        permutation_id=permutation.id,
        shot_k=len(shots),
    )
