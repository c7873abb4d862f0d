import concurrent.futures
import threading
import typing

from vseam import model as _model
from vseam import utils

ItemT = typing.TypeVar("ItemT")
ResultT = typing.TypeVar("ResultT")


def map_ordered(
    fn: typing.Callable[[_model.ModelHandle, ItemT], ResultT],
    items: typing.Sequence[ItemT],
    model: _model.ModelHandle,
    workers: typing.Optional[int] = None,
) -> typing.List[ResultT]:
    """Apply `fn` to every item, results in input order.

    Each worker thread runs against its own clone of `model`.
    """
    if workers is None:
        workers = utils.worker_count()
    if workers <= 1 or len(items) < 2:
        return [fn(model, item) for item in items]

    local = threading.local()

    def run(item: ItemT) -> ResultT:
        handle = getattr(local, "handle", None)
        if handle is None:
            handle = local.handle = model.clone()
        return fn(handle, item)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, items))
