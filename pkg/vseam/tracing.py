import contextlib
import dataclasses
import os
import typing

import opentelemetry.sdk.resources
import opentelemetry.trace
import requests
from opentelemetry.exporter.otlp.proto.http import Compression
from opentelemetry.exporter.otlp.proto.http.trace_exporter import (
    OTLPSpanExporter,
)
from opentelemetry.sdk.trace import ReadableSpan, SpanProcessor, TracerProvider, export

import vseam.resources.frameworks as resources_frameworks
import vseam.resources.git as resources_git
import vseam.resources.run as resources_run
from vseam import utils


class SynchronousBatchSpanProcessor(export.SimpleSpanProcessor):
    """Queue spans in memory and export them in one batch on flush."""

    def __init__(self, exporter: export.SpanExporter) -> None:
        super().__init__(exporter)
        self.queue: typing.List[ReadableSpan] = []

    def force_flush(self, timeout_millis: int = 30_000) -> bool:
        if not self.queue:
            return True

        try:
            exported = self.span_exporter.export(self.queue)
        finally:
            # A batch is attempted once, even when the export raises.
            self.queue.clear()

        return exported is export.SpanExportResult.SUCCESS

    def on_end(self, span: ReadableSpan) -> None:
        if not span.context.trace_flags.sampled:
            return

        self.queue.append(span)

    def shutdown(self) -> None:
        self.force_flush()
        super().shutdown()


class SessionRaisingOnPermanentError(requests.Session):  # type: ignore[misc]
    """A requests.Session that raises on an error retrying cannot resolve."""

    def request(self, *args: typing.Any, **kwargs: typing.Any) -> requests.Response:
        response = super().request(*args, **kwargs)

        # 408 and 5xx are left to the exporter's own retries.
        if 400 <= response.status_code < 500 and response.status_code != 408:
            response.raise_for_status()

        return response


@dataclasses.dataclass
class RunTracer:
    """Tracer for pipeline stages, exporting wherever the environment says."""

    run_id: str
    backend: str
    config_hash: str
    seed: typing.Optional[int] = None
    endpoint: typing.Optional[str] = dataclasses.field(
        default_factory=lambda: os.environ.get("VSEAM_OTLP_ENDPOINT")
    )
    token: typing.Optional[str] = dataclasses.field(
        default_factory=lambda: os.environ.get("VSEAM_OTLP_TOKEN")
    )
    exporter: typing.Optional[export.SpanExporter] = dataclasses.field(
        init=False, default=None
    )
    tracer: typing.Optional[opentelemetry.trace.Tracer] = dataclasses.field(
        init=False, default=None
    )
    tracer_provider: typing.Optional[TracerProvider] = dataclasses.field(
        init=False, default=None
    )
    logs: typing.List[utils.StructuredLog] = dataclasses.field(
        init=False, default_factory=list
    )

    def __post_init__(self) -> None:
        span_processor: SpanProcessor

        if utils.is_env_true("VSEAM_DEBUG"):
            self.exporter = export.ConsoleSpanExporter()
            span_processor = SynchronousBatchSpanProcessor(self.exporter)
        elif utils.is_env_true("_VSEAM_TEST"):
            from opentelemetry.sdk.trace.export.in_memory_span_exporter import (
                InMemorySpanExporter,
            )

            self.exporter = InMemorySpanExporter()
            span_processor = export.SimpleSpanProcessor(self.exporter)
        elif self.endpoint:
            headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
            self.exporter = OTLPSpanExporter(
                session=SessionRaisingOnPermanentError(),
                endpoint=f"{self.endpoint.rstrip('/')}/v1/traces",
                headers=headers,
                compression=Compression.Gzip,
            )
            span_processor = SynchronousBatchSpanProcessor(self.exporter)
        else:
            return

        resource = opentelemetry.sdk.resources.get_aggregated_resources(
            [
                resources_git.GitResourceDetector(),
                resources_frameworks.FrameworkResourceDetector(),
                resources_run.RunResourceDetector(
                    run_id=self.run_id,
                    backend=self.backend,
                    config_hash=self.config_hash,
                    seed=self.seed,
                ),
            ]
        )
        self.tracer_provider = TracerProvider(resource=resource)
        self.tracer_provider.add_span_processor(span_processor)
        self.tracer = self.tracer_provider.get_tracer("vseam")

    @contextlib.contextmanager
    def stage(
        self, name: str, **attributes: typing.Any
    ) -> typing.Iterator[typing.Optional[opentelemetry.trace.Span]]:
        if self.tracer is None:
            yield None
            return
        with self.tracer.start_as_current_span(
            f"vseam.stage.{name}",
            attributes={"vseam.stage.name": name, **attributes},
        ) as span:
            yield span

    def flush(self) -> None:
        if self.tracer_provider is not None:
            try:
                self.tracer_provider.force_flush()
            except requests.HTTPError as e:
                self.logs.append(
                    utils.StructuredLog.make("Span export failed", error=str(e))
                )

    def shutdown(self) -> None:
        if self.tracer_provider is not None:
            self.flush()
            self.tracer_provider.shutdown()
