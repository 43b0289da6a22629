import pytest

from persona_forge.ingest import RecordSet, TransactionRecord, TxnType


def make_record(user="u1", ts=0, offset=0, content="c1", kind="R",
                cents=100, genre="Drama", year=2014):
    return TransactionRecord(user, ts, offset, content, TxnType(kind),
                             cents, genre, year)


def make_record_set(*records, provenance="Parsed"):
    return RecordSet(tuple(records), provenance)


@pytest.fixture
def record_factory():
    return make_record
