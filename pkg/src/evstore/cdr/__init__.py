"""Central data recording: chunk format, transfer, ingestion and the pipeline."""

from .buffers import BufferArea, ChunkStatus, RateController
from .chunk import ChunkFile, decode_chunk, encode_chunk, events_per_chunk
from .ingest import Ingester
from .pipeline import CdrConfig, CdrPipeline, CdrReport, cdr_run, directory_source
from .transfer import ChunkReceiver, push_chunk, read_ack, transfer_chunk

__all__ = ["BufferArea", "ChunkStatus", "RateController", "ChunkFile", "decode_chunk",
           "encode_chunk", "events_per_chunk", "Ingester", "CdrConfig", "CdrPipeline",
           "CdrReport", "cdr_run", "directory_source", "ChunkReceiver", "push_chunk",
           "read_ack", "transfer_chunk"]
