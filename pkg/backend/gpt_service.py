import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import httpx
import openai
from openai import OpenAI

from backend.errors import GenerationRejectedError, TransportError, ValidationError
from backend.metrics_service import CUSTOM_KIND, METRIC_KINDS, MetricDescriptor

logger = logging.getLogger(__name__)

TOKEN_ENV = "ALPHASHARPE_LLM_TOKEN"

# Model selection (configure in .env)
MODEL = os.getenv("ALPHASHARPE_LLM_MODEL", "gpt-4o-mini")

DEFAULT_TEMPLATE = Path(__file__).parent / "prompts" / "metric_generation.txt"
MAX_ATTEMPTS = 3

SYSTEM_MESSAGE = """You design risk-adjusted performance metrics for ranking assets.
- Answer with a single JSON object {"name": ..., "kind": ..., "params": {...}} and nothing else.
- "kind" must be one of the registered kinds listed in the request.
- "params" may only contain numeric values for the parameters that kind accepts.
- Never return code."""


@dataclass
class LLMEndpoint:
    url: str
    timeout: float = 30.0
    model: str = MODEL
    token_env: str = TOKEN_ENV
    template_path: Path = DEFAULT_TEMPLATE
    max_inflight: int = 2
    max_tokens: int = 300


def create_client(endpoint: LLMEndpoint, http_client: Optional[httpx.Client] = None) -> OpenAI:
    """
    OpenAI-compatible client for the configured endpoint.
    Token comes from ALPHASHARPE_LLM_TOKEN; retries are handled here, not by the SDK.
    """
    return OpenAI(
        base_url=endpoint.url,
        api_key=os.getenv(endpoint.token_env) or "unset",
        timeout=endpoint.timeout,
        max_retries=0,
        http_client=http_client,
    )


def structured_chat(client: OpenAI, messages: list, model: str = MODEL, max_tokens: int = 300) -> str:
    """
    One chat completion. SDK failures become TransportError, a response
    without a readable first choice becomes GenerationRejectedError.
    """
    try:
        response = client.chat.completions.create(
            model=model,
            messages=messages,
            max_tokens=max_tokens,
            temperature=0.7,
        )
    except (openai.OpenAIError, ValueError) as e:
        raise TransportError(f"Completion request failed: {e}")
    try:
        content = response.choices[0].message.content
    except (AttributeError, IndexError, KeyError, TypeError) as e:
        raise GenerationRejectedError(f"Malformed completion response: {e!r}")
    return content if isinstance(content, str) else ""


def create_metric_generation_prompt(template: str, mode: str, parents: List[Tuple[MetricDescriptor, Optional[float]]],
                                    guidance: str) -> str:
    """Fill {{parents_json}}, {{mode}}, {{guidance}} and {{kinds_json}} placeholders"""
    parents_json = json.dumps(
        [{**d.to_dict(), "fitness": f} for d, f in parents], indent=2, sort_keys=True
    )
    kinds_json = json.dumps({k: sorted(v.defaults) for k, v in METRIC_KINDS.items()}, sort_keys=True)
    return (template
            .replace("{{parents_json}}", parents_json)
            .replace("{{mode}}", mode)
            .replace("{{guidance}}", guidance)
            .replace("{{kinds_json}}", kinds_json))


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.MULTILINE)


def parse_descriptor(content: str) -> MetricDescriptor:
    """Parse a completion into a descriptor of a registered (non-custom) kind"""
    text = _FENCE.sub("", content.strip()).strip()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"response is not JSON: {e}")
    if not isinstance(data, dict):
        raise ValidationError("response is not a JSON object")
    if data.get("kind") not in METRIC_KINDS or data.get("kind") == CUSTOM_KIND:
        raise ValidationError(f"unregistered kind {data.get('kind')!r}")
    return MetricDescriptor.from_dict(data)


def generate_metric_descriptor(client: OpenAI, endpoint: LLMEndpoint, mode: str,
                               parents: List[Tuple[MetricDescriptor, Optional[float]]],
                               guidance: str = "") -> MetricDescriptor:
    """
    Ask the endpoint for a crossover or mutation of the parents.
    Invalid answers are retried up to MAX_ATTEMPTS times, then rejected.
    """
    try:
        template = Path(endpoint.template_path).read_text(encoding="utf-8")
    except OSError as e:
        raise GenerationRejectedError(f"Prompt template unavailable: {e}")
    messages = [
        {"role": "system", "content": SYSTEM_MESSAGE},
        {"role": "user", "content": create_metric_generation_prompt(template, mode, parents, guidance)},
    ]
    last_problem = None
    for attempt in range(1, MAX_ATTEMPTS + 1):
        content = structured_chat(client, messages, endpoint.model, endpoint.max_tokens)
        try:
            descriptor = parse_descriptor(content)
            logger.debug(f"[LLM] {mode} attempt {attempt}: {descriptor.kind} {descriptor.params}")
            return descriptor
        except ValidationError as e:
            last_problem = str(e)
            logger.info(f"[LLM] {mode} attempt {attempt}/{MAX_ATTEMPTS} rejected: {last_problem}")
    raise GenerationRejectedError(f"No valid descriptor after {MAX_ATTEMPTS} attempts ({last_problem})")
