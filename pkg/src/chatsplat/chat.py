"""Chat backends: a deterministic codebook mock and an external-endpoint proxy.

The mock makes the whole interaction loop testable without any model: the
mean token vector is matched to the nearest codebook entry by cosine
similarity and the answer is a fixed template. The proxy serializes tokens
(CSTF blob, base64) plus the question to a JSON endpoint and surfaces its
text verbatim.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import cstf
from .encoder import TokenGrid
from .errors import ArgError, FormatError, ProxyError

PROXY_TIMEOUT_DEFAULT = 60.0


@dataclass
class MockCodebook:
    vectors: np.ndarray   # (E, D) float32
    captions: List[str]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.captions):
            raise FormatError("codebook vectors and captions disagree in length")
        if len(self.captions) == 0:
            raise ArgError("codebook must be nonempty")
        if not np.all(np.isfinite(self.vectors)):
            raise FormatError("codebook vectors contain non-finite values")


def save_codebook(codebook: MockCodebook, json_path: str) -> None:
    """JSON (captions + pointer) next to a CSTF file holding the vectors."""
    vec_path = os.path.splitext(json_path)[0] + ".cstf"
    cstf.write_records(vec_path, {"cb.vectors": codebook.vectors.astype(np.float32)})
    with open(json_path, "w") as fh:
        json.dump({"captions": codebook.captions,
                   "vectors_file": os.path.basename(vec_path)}, fh, indent=2)


def load_codebook(json_path: str) -> MockCodebook:
    with open(json_path) as fh:
        meta = json.load(fh)
    vec_path = os.path.join(os.path.dirname(os.path.abspath(json_path)),
                            meta["vectors_file"])
    recs = cstf.read_records(vec_path)
    if "cb.vectors" not in recs:
        raise FormatError("codebook CSTF misses the cb.vectors record")
    return MockCodebook(vectors=np.array(recs["cb.vectors"], np.float32),
                        captions=list(meta["captions"]))


def cosine_similarities(query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity of one query against rows; zero norms score 0."""
    q = np.asarray(query, np.float64)
    v = np.asarray(vectors, np.float64)
    qn = np.linalg.norm(q)
    vn = np.linalg.norm(v, axis=1)
    denom = qn * vn
    sims = np.zeros(v.shape[0])
    ok = denom > 0
    sims[ok] = (v[ok] @ q) / denom[ok]
    return sims


def mock_chat(tokens: TokenGrid, question: str, codebook: MockCodebook) -> str:
    """Deterministic answer: "[<level>] <caption>" of the cosine-nearest entry.

    Ties resolve to the lowest entry index (argmax picks the first maximum).
    The question is accepted for interface parity; the mock ignores it."""
    mean_vec = tokens.tokens.mean(axis=0)
    sims = cosine_similarities(mean_vec, codebook.vectors)
    best = int(np.argmax(sims))
    return f"[{tokens.level}] {codebook.captions[best]}"


def tokens_to_blob(tokens: TokenGrid) -> bytes:
    return cstf.records_to_bytes({"tokens": tokens.tokens.astype(np.float32)})


def proxy_chat(tokens: TokenGrid, question: str, endpoint_url: str,
               timeout: float = PROXY_TIMEOUT_DEFAULT,
               backend_label: Optional[str] = None) -> str:
    """POST tokens + question to an external JSON endpoint and return its text.

    Contract: request {"question", "level", "t", "d", "tokens_b64"}; response
    {"answer": "..."}. Any transport failure, timeout, or malformed reply
    raises ProxyError (the HTTP layer maps it to 502)."""
    import httpx

    payload = {
        "question": question,
        "level": tokens.level,
        "t": int(tokens.count),
        "d": int(tokens.tokens.shape[1]),
        "tokens_b64": base64.b64encode(tokens_to_blob(tokens)).decode("ascii"),
    }
    try:
        resp = httpx.post(endpoint_url, json=payload, timeout=timeout)
        resp.raise_for_status()
        body = resp.json()
    except httpx.TimeoutException as exc:
        raise ProxyError(f"chat endpoint timed out after {timeout}s: {exc}") from exc
    except httpx.HTTPError as exc:
        raise ProxyError(f"chat endpoint failed: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ProxyError(f"chat endpoint returned invalid JSON: {exc}") from exc
    except ValueError as exc:  # httpx wraps json errors as ValueError
        raise ProxyError(f"chat endpoint returned invalid JSON: {exc}") from exc
    if not isinstance(body, dict) or not isinstance(body.get("answer"), str):
        raise ProxyError(f"chat endpoint reply misses a string 'answer': {body!r}")
    return body["answer"]
