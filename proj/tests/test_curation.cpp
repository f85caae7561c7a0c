#include "crce/curation_http.hpp"
#include "crce/curation_service.hpp"
#include "crce/toy_world.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <barrier>
#include <numeric>
#include <thread>

using namespace crce;
using nlohmann::json;

namespace {

CorefConceptDataset two_records() {
    CorefConceptDataset d;
    d.concepts.push_back(toy::dog_record());
    auto draft = toy::dog_record();
    draft.target = "cat";
    draft.category = Category::IP;
    draft.state = RecordState::Draft;
    draft.corefs.train.pop_back();
    for (auto* list : {&draft.retains.train, &draft.retains.test})
        for (auto& e : *list)
            if (e.text == "cat")
                e.text = "lynx";
    d.concepts.push_back(draft);
    return d;
}

EditCommand cmd(std::string path, EditOp op, json value, std::int64_t rev, std::string record = "dog") {
    return {std::move(record), std::move(path), op, std::move(value), rev};
}

/// Proposal built from the record's pools with a few deliberate differences.
ProposalPools proposal_from(const ConceptRecord& r) {
    ProposalPools p;
    p.corefs = to_candidates(r.corefs.all());
    p.retains = to_candidates(r.retains.all());
    // two certainty changes
    p.corefs[0].certainty = Certainty::VeryLow;
    p.corefs[0].certainty_label = "Very Low";
    p.retains[1].certainty = Certainty::VeryLow;
    p.retains[1].certainty_label = "Very Low";
    // one removal, two additions
    p.corefs.erase(p.corefs.begin() + 12);
    p.corefs.push_back({"doggo", "High", Certainty::High});
    p.retains.push_back({"red fox", "Normal", Certainty::Normal});
    return p;
}

} // namespace

TEST_CASE("records are listed with filters") {
    CurationService s(two_records());
    CHECK(s.list_records().size() == 2);
    auto drafts = s.list_records({RecordState::Draft, std::nullopt});
    REQUIRE(drafts.size() == 1);
    CHECK(drafts[0].target == "cat");
    CHECK(drafts[0].coref_train == 9);
    CHECK(drafts[0].errors == 0);
    CHECK(s.list_records({std::nullopt, Category::Object}).size() == 1);
    CHECK(to_json(drafts[0])["id"] == "cat");
}

TEST_CASE("edits bump the revision and reject stale bases") {
    CurationService s(two_records());
    const auto before = s.get_record("dog");
    auto r = s.apply_edit(cmd("corefs.train[2]", EditOp::SetCertainty, "Low", before.revision));
    CHECK(r.record.revision == before.revision + 1);
    CHECK(r.record.corefs.train[2].certainty == Certainty::Low);
    CHECK(r.record.state == RecordState::Draft);

    try {
        s.apply_edit(cmd("corefs.train[2]", EditOp::SetText, "hound", before.revision));
        FAIL("expected a conflict");
    } catch (const CurationError& e) {
        CHECK(e.code() == "REVISION_CONFLICT");
        CHECK(e.current_revision() == before.revision + 1);
    }
    CHECK(s.get_record("dog").corefs.train[2].text == before.corefs.train[2].text);
}

TEST_CASE("edit paths and values are validated") {
    CurationService s(two_records());
    auto expect_code = [&](const EditCommand& c, const std::string& code) {
        try {
            s.apply_edit(c);
            FAIL("expected " << code);
        } catch (const CurationError& e) {
            CHECK(e.code() == code);
        }
    };
    expect_code(cmd("corefs.train[10]", EditOp::SetText, "x", 0), "INVALID_PATH");
    expect_code(cmd("corefs.middle[0]", EditOp::SetText, "x", 0), "INVALID_PATH");
    expect_code(cmd("corefs.train", EditOp::DeleteEntry, nullptr, 0), "INVALID_PATH");
    expect_code(cmd("corefs.train[0]", EditOp::SetCertainty, "Banana", 0), "INVALID_VALUE");
    expect_code(cmd("corefs.train[0]", EditOp::SetText, "   ", 0), "INVALID_VALUE");
    expect_code(cmd("retains.test", EditOp::AddEntry, json{{"text", "x"}}, 0), "INVALID_VALUE");
    expect_code(cmd("corefs.train[0]", EditOp::SetText, "x", 0, "unicorn"), "NOT_FOUND");
    CHECK(s.get_record("dog").revision == 0);
}

TEST_CASE("approval is blocked by validation errors") {
    CurationService s(two_records());
    try {
        s.apply_edit(cmd("", EditOp::ApproveRecord, nullptr, 0, "cat"));
        FAIL("expected approval to be blocked");
    } catch (const CurationError& e) {
        CHECK(e.code() == "APPROVAL_BLOCKED");
        bool length = false;
        for (const auto& v : e.violations())
            length |= v.code == "LIST_LENGTH" && v.path == "corefs.train";
        CHECK(length);
    }
    auto fixed = s.apply_edit(cmd("corefs.train", EditOp::AddEntry, json{{"text", "feline friend"}, {"certainty", "High"}}, 0, "cat"));
    auto approved = s.apply_edit(cmd("", EditOp::ApproveRecord, nullptr, fixed.record.revision, "cat"));
    CHECK(approved.record.state == RecordState::Approved);
    CHECK(approved.record.revision == 2);
}

TEST_CASE("add and delete keep list order") {
    CurationService s(two_records());
    auto r = s.apply_edit(cmd("retains.test[0]", EditOp::AddEntry, json{{"text", "coyote"}, {"certainty", "very high"}}, 0));
    CHECK(r.record.retains.test.front().text == "coyote");
    CHECK(r.record.retains.test.size() == 6);
    r = s.apply_edit(cmd("retains.test[0]", EditOp::DeleteEntry, nullptr, 1));
    CHECK(r.record.retains.test.size() == 5);
    CHECK(r.record.retains.test == toy::dog_record().retains.test);
}

TEST_CASE("concurrent edits on one base revision: exactly one wins") {
    CurationService s(two_records());
    constexpr int kThreads = 8;
    std::atomic<int> ok{0}, conflict{0};
    std::barrier sync(kThreads);
    {
        std::vector<std::jthread> ts;
        for (int i = 0; i < kThreads; ++i)
            ts.emplace_back([&, i] {
                sync.arrive_and_wait();
                try {
                    s.apply_edit(cmd("corefs.train[0]", EditOp::SetText, "variant " + std::to_string(i), 0));
                    ++ok;
                } catch (const CurationError& e) {
                    if (e.code() == "REVISION_CONFLICT")
                        ++conflict;
                }
            });
    }
    CHECK(ok == 1);
    CHECK(conflict == kThreads - 1);
    CHECK(s.get_record("dog").revision == 1);
}

TEST_CASE("accepted edits are persisted before returning") {
    auto dir = crce::testing::scratch_dir("curation_persist");
    save_dataset(two_records(), dir / "d.json");
    {
        CurationService s(dir / "d.json");
        s.apply_edit(cmd("corefs.test[1]", EditOp::SetText, "hot dog", 0));
    }
    auto back = load_dataset(dir / "d.json");
    CHECK(back.find("dog")->corefs.test[1].text == "hot dog");
    CHECK(back.find("dog")->revision == 1);
    CurationService again(dir / "d.json");
    CHECK_THROWS_AS(again.apply_edit(cmd("corefs.test[1]", EditOp::SetText, "x", 0)), CurationError);
}

TEST_CASE("regeneration diffs the proposal without applying it") {
    auto data = two_records();
    MockChatClient llm;
    llm.set_fallback(render_generation_response({proposal_from(data.concepts[0])}));
    CurationService s(data, std::nullopt, &llm);
    auto diff = s.request_regeneration("dog", "prefer everyday synonyms");
    CHECK(diff.round == 2);
    CHECK(diff.base_revision == 0);
    int added = 0, removed = 0, changed = 0;
    for (const auto& c : diff.changes) {
        added += c.kind == EntryChange::Kind::Added;
        removed += c.kind == EntryChange::Kind::Removed;
        changed += c.kind == EntryChange::Kind::Changed;
    }
    CHECK(added == 2);
    CHECK(removed == 1);
    CHECK(changed == 2);
    CHECK(s.get_record("dog") == data.concepts[0]);
    CHECK(to_json(diff)["changes"].size() == 5);

    auto second = s.request_regeneration("dog", "more breeds");
    CHECK(second.round == 3);
}

TEST_CASE("accepting a subset of a diff yields applicable commands") {
    auto data = two_records();
    MockChatClient llm;
    llm.set_fallback(render_generation_response({proposal_from(data.concepts[0])}));
    CurationService s(data, std::nullopt, &llm);
    auto diff = s.request_regeneration("dog", "feedback");
    REQUIRE(diff.changes.size() == 5);
    std::vector<std::size_t> accepted;
    for (std::size_t i = 0; i < diff.changes.size() && accepted.size() < 2; ++i)
        if (diff.changes[i].kind != EntryChange::Kind::Removed)
            accepted.push_back(i);
    auto cmds = diff_to_edit_commands(diff, accepted);
    REQUIRE(cmds.size() == 2);
    for (const auto& c : cmds)
        s.apply_edit(c);
    CHECK(s.get_record("dog").revision == 2);

    std::vector<std::size_t> all(diff.changes.size());
    std::iota(all.begin(), all.end(), 0);
    CurationService fresh(data, std::nullopt, &llm);
    auto d2 = fresh.request_regeneration("dog", "feedback");
    for (const auto& c : diff_to_edit_commands(d2, all))
        fresh.apply_edit(c);
    auto rec = fresh.get_record("dog");
    CHECK(rec.corefs.all().size() == 15);
    CHECK(rec.retains.all().size() == 16);
    CHECK_THROWS_AS(diff_to_edit_commands(diff, {99}), ValidationError);
}

TEST_CASE("a failing LLM leaves the record and session untouched") {
    auto data = two_records();
    MockChatClient llm;
    CurationService s(data, std::nullopt, &llm);
    CHECK_THROWS_AS(s.request_regeneration("dog", "feedback"), TransportError);
    CHECK(s.get_record("dog") == data.concepts[0]);
    llm.set_fallback(render_generation_response({proposal_from(data.concepts[0])}));
    CHECK(s.request_regeneration("dog", "feedback").round == 2);

    CurationService none(data);
    CHECK_THROWS_AS(none.request_regeneration("dog", "x"), ConfigError);
}

TEST_CASE("edit commands round-trip through JSON") {
    auto c = cmd("retains.train[4]", EditOp::SetCertainty, "High", 7);
    CHECK(edit_command_from_json(to_json(c)) == c);
    auto j = json::parse(R"({"path":"corefs.test[0]","operation":"delete_entry","base_revision":1})");
    CHECK(edit_command_from_json(j, "dog").record == "dog");
    CHECK_THROWS(parse_edit_op("rename"));
}

TEST_CASE("HTTP API") {
    auto data = two_records();
    MockChatClient llm;
    CurationService svc(data, std::nullopt, &llm);
    CurationServerOptions opt;
    opt.port = 0;
    CurationServer server(svc, opt);
    const int port = server.bind();
    std::jthread th([&] { server.listen(); });
    httplib::Client cli("127.0.0.1", port);
    const httplib::Headers ui{{"Origin", "http://localhost:5173"}};

    auto list = cli.Get("/records?state=draft", ui);
    REQUIRE(list);
    CHECK(list->status == 200);
    CHECK(json::parse(list->body)["records"].size() == 1);
    CHECK(list->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");

    auto other = cli.Get("/records", httplib::Headers{{"Origin", "http://evil.example"}});
    REQUIRE(other);
    CHECK_FALSE(other->has_header("Access-Control-Allow-Origin"));

    auto pre = cli.Options("/records/dog/edits", httplib::Headers{{"Origin", "http://evil.example"}});
    REQUIRE(pre);
    CHECK(pre->status == 403);
    pre = cli.Options("/records/dog/edits", ui);
    REQUIRE(pre);
    CHECK(pre->status == 204);

    auto one = cli.Get("/records/dog");
    REQUIRE(one);
    CHECK(json::parse(one->body)["record"]["target"] == "dog");
    CHECK(cli.Get("/records/unicorn")->status == 404);

    json edit = {{"path", "corefs.train[0]"}, {"operation", "set_text"}, {"value", "good boy"}, {"base_revision", 0}};
    auto e = cli.Post("/records/dog/edits", edit.dump(), "application/json");
    REQUIRE(e);
    CHECK(e->status == 200);
    CHECK(json::parse(e->body)["record"]["revision"] == 1);
    e = cli.Post("/records/dog/edits", edit.dump(), "application/json");
    CHECK(e->status == 409);
    CHECK(json::parse(e->body)["error"]["current_revision"] == 1);

    auto a = cli.Post("/records/cat/approve", R"({"base_revision":0})", "application/json");
    CHECK(a->status == 422);
    CHECK_FALSE(json::parse(a->body)["error"]["violations"].empty());

    auto g = cli.Post("/records/dog/regenerate", R"({"feedback":"more"})", "application/json");
    CHECK(g->status == 502);
    CHECK(json::parse(g->body)["error"]["code"] == "LLM_FAILURE");
    llm.set_fallback(render_generation_response({proposal_from(data.concepts[0])}));
    g = cli.Post("/records/dog/regenerate", R"({"feedback":"more"})", "application/json");
    CHECK(g->status == 200);
    auto gj = json::parse(g->body);
    CHECK(gj["round"] == 2);
    CHECK(gj["apply_all"].size() == gj["changes"].size());

    CHECK(cli.Post("/records/dog/edits", "{not json", "application/json")->status == 400);
    server.stop();
}
