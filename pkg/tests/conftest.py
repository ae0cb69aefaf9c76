"""Shared fixtures: a tiny hand-checkable dataset used across the test suite.

The graph is a forum/post/person/university chain; two of its labels join
relational tables. Every expected result in tests that use this fixture was
computed by hand from the literal rows below.
"""
from __future__ import annotations

import json
import os

import pytest

from cmgrj.datamodel import load_dataset

MICRO_MANIFEST = {
    "vertex_labels": {
        "Forum": {"file": "nodes_Forum.csv", "properties": [["name", "string"]]},
        "Post": {"file": "nodes_Post.csv", "properties": [["name", "string"]]},
        "Person": {"file": "nodes_Person.csv", "properties": [["name", "string"]]},
        "University": {
            "file": "nodes_University.csv",
            "properties": [["name", "string"], ["department", "string"]],
        },
    },
    "edge_types": [
        {"type": "CONTAINS", "file": "edges_CONTAINS.csv",
         "source": "Forum", "target": "Post", "properties": []},
        {"type": "CREATED_BY", "file": "edges_CREATED_BY.csv",
         "source": "Post", "target": "Person", "properties": []},
        {"type": "STUDY_AT", "file": "edges_STUDY_AT.csv",
         "source": "Person", "target": "University", "properties": []},
        {"type": "KNOWS", "file": "edges_KNOWS.csv",
         "source": "Person", "target": "Person", "properties": []},
    ],
    "tables": {
        "p": {"file": "table_p.csv", "columns": [["id", "integer"], ["hashtag", "string"]]},
        "un": {"file": "table_un.csv",
               "columns": [["name", "string"], ["rank", "integer"], ["city", "string"]]},
        "ci": {"file": "table_ci.csv", "columns": [["name", "string"], ["country", "string"]]},
        "co": {"file": "table_co.csv",
               "columns": [["country", "string"], ["continent", "string"]]},
        "tg": {"file": "table_tg.csv", "columns": [["id", "integer"], ["tags", "string"]]},
    },
    "joinable_pairs": [
        {"label": "Post", "property": "id", "table": "p", "column": "id"},
        {"label": "University", "property": "name", "table": "un", "column": "name"},
        {"label": "Post", "property": "id", "table": "tg", "column": "id"},
    ],
}

MICRO_FILES = {
    "nodes_Forum.csv": "id,name\n1,f1\n",
    "nodes_Post.csv": "id,name\n1,post-a\n2,post-b\n3,post-c\n",
    "nodes_Person.csv": "id,name\n1,alice\n2,bob\n",
    "nodes_University.csv": "id,name,department\n1,u1,cs\n2,u2,bio\n",
    "edges_CONTAINS.csv": "src,dst\n1,1\n1,2\n1,3\n",
    "edges_CREATED_BY.csv": "src,dst\n1,1\n2,1\n3,2\n",
    "edges_STUDY_AT.csv": "src,dst\n1,1\n2,2\n",
    "edges_KNOWS.csv": "src,dst\n1,2\n",
    "table_p.csv": "id,hashtag\n1,#a\n2,#b\n4,#d\n",
    "table_un.csv": "name,rank,city\nu1,100,c1\nu2,900,c2\n",
    "table_ci.csv": "name,country\nc1,x\nc2,y\n",
    "table_co.csv": "country,continent\nx,Asia\ny,Europe\n",
    "table_tg.csv": "id,tags\n1,x;y;z\n2,a\n4,b\n",
}

# One chain query over the fixture, as it would appear in a query file.
# Two joinable components: {p} (joins Post) and {un, ci, co} (joins University).
MICRO_QUERY_TEXT = (
    "MATCH (n4:Forum)-[:CONTAINS]->(n1:Post)-[:CREATED_BY]->(n2:Person)"
    "-[:STUDY_AT]->(n3:University) "
    "WHERE n3.department = 'cs' "
    "RETURN n1.id AS pid, n4.name AS fname, n3.name AS uname\n"
    ";\n"
    "SELECT g.fname, p.hashtag "
    "FROM neo4j g, p, un, ci, co "
    "WHERE g.pid = p.id AND g.uname = un.name AND un.city = ci.name "
    "AND ci.country = co.country AND un.rank < 500 AND co.continent = 'Asia'\n"
)

# Hand-evaluated: cs-department filter keeps posts 1 and 2 (alice's), p joins
# drop nothing further (ids 1,2 present), u1 has rank 100 < 500 in Asia.
MICRO_EXPECTED_ROWS = {("f1", "#a"), ("f1", "#b")}


def write_micro_dataset(dirpath: str) -> str:
    os.makedirs(dirpath, exist_ok=True)
    for name, body in MICRO_FILES.items():
        with open(os.path.join(dirpath, name), "w", encoding="utf-8") as fh:
            fh.write(body)
    manifest_path = os.path.join(dirpath, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(MICRO_MANIFEST, fh, indent=2)
    return manifest_path


@pytest.fixture(scope="session")
def micro_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("micro")
    return write_micro_dataset(str(d))


@pytest.fixture(scope="session")
def micro(micro_dir):
    return load_dataset(micro_dir)
