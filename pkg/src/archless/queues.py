import threading
from collections import deque
from queue import Empty, Full

from .errors import QueueDisconnected


class BoundedQueue:
    """Bounded multi-producer/single-consumer FIFO.

    ``maxsize=0`` means unbounded. ``on_put`` is called after every
    successful put so the consumer loop can be woken.
    """

    def __init__(self, maxsize=0, on_put=None):
        assert maxsize >= 0
        self.maxsize = maxsize
        self.on_put = on_put
        self._q = deque()
        self._mutex = threading.Lock()
        self._not_full = threading.Condition(self._mutex)
        self._closed = False
        self.max_depth = 0

    def put(self, item, block=True, timeout=None):
        with self._not_full:
            if self._closed:
                raise QueueDisconnected("queue closed")
            if 0 < self.maxsize <= len(self._q):
                if not block:
                    raise Full
                if not self._not_full.wait_for(
                        lambda: self._closed or len(self._q) < self.maxsize, timeout=timeout):
                    raise Full
                if self._closed:
                    raise QueueDisconnected("queue closed")
            self._q.append(item)
            if len(self._q) > self.max_depth:
                self.max_depth = len(self._q)
        if self.on_put is not None:
            self.on_put()

    def put_nowait(self, item):
        self.put(item, block=False)

    def get_nowait(self):
        with self._mutex:
            if not self._q:
                raise Empty
            item = self._q.popleft()
            self._not_full.notify()
        return item

    def drain(self) -> list:
        with self._mutex:
            if not self._q:
                return []
            items = list(self._q)
            self._q.clear()
            self._not_full.notify_all()
        return items

    def close(self):
        with self._not_full:
            self._closed = True
            self._not_full.notify_all()

    @property
    def closed(self):
        return self._closed

    def qsize(self):
        return len(self._q)

    def empty(self):
        return not self._q

    def full(self):
        return 0 < self.maxsize <= len(self._q)
