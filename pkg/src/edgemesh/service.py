"""Service mode: one broker behind a TCP socket speaking JSON-line frames.

Connection I/O is concurrent, but every frame is handled on the asyncio loop
thread, so broker state is only ever mutated from one place.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any, Callable

from .aggregation import CapabilityRegistry
from .broker import BrokerNode, decode_frame, encode_frame

log = logging.getLogger(__name__)


class AsyncioHost:
    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop
        self._t0 = loop.time()
        self.writers: dict[str, asyncio.StreamWriter] = {}

    def now(self) -> float:
        return (self.loop.time() - self._t0) * 1000.0

    def call_later(self, delay: float, fn: Callable, *args: Any) -> asyncio.TimerHandle:
        return self.loop.call_later(delay / 1000.0, fn, *args)

    def to_client(self, client_id: str, frame: dict) -> None:
        writer = self.writers.get(client_id)
        if writer is None or writer.is_closing():
            return
        writer.write(encode_frame(frame))

    def to_peer(self, peer: str, msg: Any) -> None:
        raise RuntimeError("service mode runs a single, unfederated broker")

    def to_coordinator(self, update: dict) -> None:
        raise RuntimeError("service mode runs a single, unfederated broker")


class BrokerService:
    def __init__(self, broker_id: str = "B1", *, budget: int = 100, registry: CapabilityRegistry | None = None,
                 retry_timeout: float = 2000):
        self.broker_id = broker_id
        self.budget = budget
        self.registry = registry
        self.retry_timeout = retry_timeout
        self.node: BrokerNode | None = None
        self.host: AsyncioHost | None = None
        self.server: asyncio.base_events.Server | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        loop = asyncio.get_running_loop()
        self.host = AsyncioHost(loop)
        self.node = BrokerNode(self.broker_id, registry=self.registry, budget=self.budget,
                               retry_timeout=self.retry_timeout, host=self.host)
        self.node.start()
        self.server = await asyncio.start_server(self._handle, host, port)
        return self.server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        client_id = None
        try:
            while line := await reader.readline():
                try:
                    frame = decode_frame(line)
                except ValueError:
                    writer.write(encode_frame({"t": "ERROR", "reason": "BAD_FRAME"}))
                    continue
                if client_id is None:
                    if frame["t"] != "CONNECT" or not frame.get("client"):
                        writer.write(encode_frame({"t": "ERROR", "reason": "NOT_CONNECTED"}))
                        continue
                    client_id = frame["client"]
                    self.host.writers[client_id] = writer
                self.node.handle_frame(client_id, frame)
                await writer.drain()
                if frame["t"] == "DISCONNECT":
                    break
        finally:
            if client_id is not None and self.host.writers.get(client_id) is writer:
                del self.host.writers[client_id]
                self.node.disconnect(client_id)
            writer.close()
            log.debug("connection for %s closed", client_id)


def serve_forever(host: str, port: int, broker_id: str = "B1", budget: int = 100) -> None:
    async def main() -> None:
        service = BrokerService(broker_id, budget=budget)
        bound = await service.start(host, port)
        print(f"broker {broker_id} listening on {host}:{bound}", flush=True)
        await service.server.serve_forever()

    asyncio.run(main())
