from .functions import (
    LfSpec,
    Synthetic,
    VlmMultiQuestion,
    VlmSingleQuestion,
    format_transcript,
    multi_question_label,
    parse_binary_answer,
    run_labeling_function,
)
from .ollama import (
    EndpointUnreachable,
    OllamaClient,
    PayloadTooLarge,
    RequestFailed,
    VlmEndpointConfig,
    build_chat_request,
)
from .synthetic import BenchmarkParams, SyntheticBenchmark, generate_benchmark, synthetic_column, synthetic_label

__all__ = [
    "BenchmarkParams",
    "EndpointUnreachable",
    "LfSpec",
    "OllamaClient",
    "PayloadTooLarge",
    "RequestFailed",
    "Synthetic",
    "SyntheticBenchmark",
    "VlmEndpointConfig",
    "VlmMultiQuestion",
    "VlmSingleQuestion",
    "build_chat_request",
    "format_transcript",
    "generate_benchmark",
    "multi_question_label",
    "parse_binary_answer",
    "run_labeling_function",
    "synthetic_column",
    "synthetic_label",
]
