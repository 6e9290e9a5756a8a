from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfc.dpquery import (
    ONES_COLUMN,
    Aggregate,
    Aggregation,
    ColumnRef,
    DpQueryConfig,
    Number,
    Query,
    Setting,
    admit,
    compile_query,
    format_query,
    lower,
    parse,
)
from cfc.errors import AdmissionDenied, QuerySemanticError, QuerySyntaxError
from cfc.policy import PolicyEdge
from cfc.scenarios import sample_query_text

SAMPLE = sample_query_text()
FIXTURES = Path(__file__).parent / "fixtures"


def edge(eps=1.0, delta=1e-8):
    return PolicyEdge("phh", 1, 2, b"\0" * 32, {"epsilon_max": eps, "delta_max": delta}, 1, True)


def test_bundled_query_matches_fixture():
    assert SAMPLE == (FIXTURES / "sample_query.dpsql").read_text()


def test_sample_query_parses_with_hints_attached():
    q = parse(SAMPLE)
    assert [s.name for s in q.options] == ["epsilon", "delta", "max_groups_contributed"]
    assert q.items[:2] == (ColumnRef("color"), ColumnRef("food"))
    weekdays, weekends = q.items[2:]
    assert weekdays.hints == (Setting("L_inf", Number("3")),)
    assert [(h.name, h.value.value) for h in weekends.hints] == [("L_inf", 4.5), ("L_1", 8.0), ("L_2", 6.0)]
    assert weekends.alias == "total_num_purchased_weekends"
    assert q.source_table == "uploaded_device_data"
    assert q.group_by == ("color", "food")


def test_sample_query_lowers():
    cfg = compile_query(SAMPLE)
    assert (cfg.epsilon, cfg.delta, cfg.max_groups_contributed) == (1.0, 1e-8, 2)
    assert cfg.key_columns == ("color", "food")
    assert cfg.aggregations == (
        Aggregation("num_purchased_weekdays", "total_num_purchased_weekdays", 3.0),
        Aggregation("num_purchased_weekends", "total_num_purchased_weekends", 4.5, 8.0, 6.0),
    )
    assert DpQueryConfig.from_dict(cfg.to_dict()) == cfg


def test_missing_options_reported_at_select():
    with pytest.raises(QuerySyntaxError) as info:
        parse("SELECT color, SUM(x) @{L_inf=1} AS s FROM t GROUP BY color")
    assert (info.value.line, info.value.column) == (1, 1)


def test_missing_options_after_comment_line():
    with pytest.raises(QuerySyntaxError) as info:
        parse("-- header\n  select WITH color FROM t GROUP BY color")
    assert (info.value.line, info.value.column) == (2, 3)


def test_keywords_case_insensitive():
    q = parse("select with differential_privacy options (epsilon=1, delta=1e-9, max_groups_contributed=1) "
              "k, sum(v) @{l_inf=2} as s from t group by k")
    assert lower(q).aggregations[0].l_inf == 2.0


def test_count_lowers_to_ones_column():
    cfg = compile_query("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-9, max_groups_contributed=1)"
                        " k, COUNT(*) @{L_inf=1} AS n FROM t GROUP BY k;")
    assert cfg.aggregations == (Aggregation(ONES_COLUMN, "n", 1.0),)


@pytest.mark.parametrize("text,line,column", [
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1) k FROM", 1, 60),
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1) k FROM t", 1, 62),
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1) k FROM t GROUP BY k extra", 1, 74),
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1)\n k, SUM(v) AS FROM t GROUP BY k", 2, 15),
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1) k, MAX(v) AS m FROM t GROUP BY k", 1, 60),
    ("SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1) k # FROM t GROUP BY k", 1, 56),
])
def test_syntax_error_positions(text, line, column):
    with pytest.raises(QuerySyntaxError) as info:
        parse(text)
    assert (info.value.line, info.value.column) == (line, column)


HEAD = "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-9, max_groups_contributed=1) "


@pytest.mark.parametrize("body,message", [
    ("k, SUM(v) @{L_3 = 1} AS s FROM t GROUP BY k", "unknown hint L_3"),
    ("k, SUM(v) AS s FROM t GROUP BY k", "lacks an L_inf hint"),
    ("k, SUM(v) @{L_inf=2, L_1=1} AS s FROM t GROUP BY k", "tighter"),
    ("k, SUM(v) @{L_inf=2, L_inf=3} AS s FROM t GROUP BY k", "duplicate hint"),
    ("k, SUM(v) @{L_inf=0} AS s FROM t GROUP BY k", "must be positive"),
    ("j, SUM(v) @{L_inf=1} AS s FROM t GROUP BY k", "neither aggregated"),
    ("k, SUM(k) @{L_inf=1} AS s FROM t GROUP BY k", "also aggregated"),
    ("k, SUM(v) @{L_inf=1} AS s, SUM(w) @{L_inf=1} AS s FROM t GROUP BY k", "duplicate output"),
    ("k FROM t GROUP BY k", "no aggregation"),
    ("k, SUM(v) @{L_inf=1} AS s FROM t GROUP BY k, k", "duplicate GROUP BY"),
])
def test_semantic_errors(body, message):
    with pytest.raises(QuerySemanticError, match=message):
        compile_query(HEAD + body)


@pytest.mark.parametrize("options,message", [
    ("epsilon=1, delta=1e-9", "missing option"),
    ("epsilon=1, delta=1e-9, max_groups_contributed=1.5", "integer"),
    ("epsilon=1, delta=1e-9, max_groups_contributed=1, rho=2", "unknown option"),
    ("epsilon=1, epsilon=2, delta=1e-9, max_groups_contributed=1", "duplicate option"),
    ("epsilon=0, delta=1e-9, max_groups_contributed=1", "epsilon"),
    ("epsilon=1, delta=1, max_groups_contributed=1", "delta"),
    ("epsilon=1, delta=1e-9, max_groups_contributed=0", "max_groups_contributed"),
])
def test_option_errors(options, message):
    with pytest.raises(QuerySemanticError, match=message):
        compile_query(f"SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS ({options}) k, SUM(v) @{{L_inf=1}} AS s "
                      "FROM t GROUP BY k")


def test_admit():
    cfg = compile_query(SAMPLE)
    admit(cfg, edge())
    with pytest.raises(AdmissionDenied) as info:
        admit(cfg, edge(eps=0.9999))
    assert info.value.bound == "epsilon"
    with pytest.raises(AdmissionDenied) as info:
        admit(cfg, edge(delta=1e-9))
    assert info.value.bound == "delta"


def test_admit_boundary_values():
    tight = compile_query(SAMPLE.replace("epsilon=1", "epsilon=1.0001"))
    with pytest.raises(AdmissionDenied, match="epsilon"):
        admit(tight, edge())
    loose = compile_query(SAMPLE.replace("epsilon=1", "epsilon=0.5").replace("1e-8", "1e-9"))
    admit(loose, edge())


def test_format_sample_query_round_trip():
    q = parse(SAMPLE)
    assert parse(format_query(q)) == q


# --- property: formatter and parser are inverse --------------------------

ident = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True).filter(
    lambda s: s.upper() not in {"AS", "BY", "SUM", "FROM", "WITH", "GROUP", "COUNT", "SELECT", "OPTIONS"})
number = st.one_of(st.integers(0, 10**6).map(str),
                   st.floats(1e-12, 1e6, allow_nan=False).map(repr).filter(lambda s: "inf" not in s))
setting = st.builds(Setting, ident, st.builds(Number, number))
aggregate = st.one_of(
    st.builds(Aggregate, st.just("SUM"), ident, st.lists(setting, max_size=3).map(tuple), ident),
    st.builds(Aggregate, st.just("COUNT"), st.none(), st.lists(setting, max_size=3).map(tuple), ident),
)
item = st.one_of(ident.map(ColumnRef), aggregate)


@given(st.builds(Query, st.lists(setting, min_size=1, max_size=4).map(tuple),
                 st.lists(item, min_size=1, max_size=5).map(tuple), ident,
                 st.lists(ident, min_size=1, max_size=3).map(tuple)))
def test_parse_format_round_trip(q):
    assert parse(format_query(q)) == q
