#include "support/small.hpp"

#include "bwm/service.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <thread>

using namespace bwm;
using nlohmann::json;

namespace {

std::unique_ptr<SandboxService> make_service(bool with_model = true, ServiceOptions opt = {}) {
  auto s = small::make_small();
  std::optional<TrainState<float>> st;
  if (with_model) st = init_state(s.run, s.codec, s.data);
  const std::string val = s.cohort.back().subject_id;
  return std::make_unique<SandboxService>(std::move(s.cohort), std::move(st), opt, std::vector<std::string>{val});
}

json body(const Reply& r) { return json::parse(r.body); }

std::string whatif_body(json j) { return j.dump(); }

wire::JobView finish(SandboxService& svc, const Reply& r) {
  EXPECT_EQ(r.status, 202) << r.body;
  const auto w = body(r).get<wire::WhatifResponse>();
  svc.wait_idle();
  const auto j = svc.job(w.job);
  EXPECT_EQ(j.status, 200);
  return body(j).get<wire::JobView>();
}

}  // namespace

TEST(Wire, RoundTrip) {
  wire::WhatifRequest w;
  w.branch = "j3";
  w.action = "SUR+AM";
  w.interval_days = 30;
  w.seed = 9;
  const auto back = json(w).get<wire::WhatifRequest>();
  EXPECT_EQ(back.branch, w.branch);
  EXPECT_FALSE(back.session.has_value());
  EXPECT_EQ(back.seed, 9u);
  EXPECT_FALSE(json(w).contains("session"));

  wire::ErrorPayload e{"index_out_of_range", "m", false, std::array<int, 2>{0, 15}};
  const auto eb = json(e).get<wire::ErrorPayload>();
  EXPECT_EQ(eb.valid_range, e.valid_range);

  wire::JobView v{"j1", "s1", "done", std::nullopt, wire::JobResult{}};
  v.result->hash = "abc";
  EXPECT_EQ(json(v).get<wire::JobView>().result->hash, "abc");
}

TEST(Service, PatientsAndTimepoints) {
  auto svc = make_service(false);
  const auto p = body(svc->patients()).get<std::vector<wire::PatientSummary>>();
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p.back().split, "val");
  EXPECT_EQ(p.front().plans.size() + 1, static_cast<std::size_t>(p.front().timepoints));

  const auto t = svc->timepoint(p[0].id, 1);
  ASSERT_EQ(t.status, 200);
  const auto tp = body(t).get<wire::TimepointState>();
  EXPECT_EQ(tp.day, p[0].days[1]);
  EXPECT_EQ(tp.history.size(), 1u);
  EXPECT_EQ(tp.slices.counts, (std::array<int, 3>{16, 16, 16}));

  EXPECT_EQ(svc->timepoint("nobody", 0).status, 404);
  const auto bad = svc->timepoint(p[0].id, 99);
  EXPECT_EQ(bad.status, 404);
  const auto e = body(bad).get<wire::ErrorPayload>();
  EXPECT_EQ(e.error, "unknown_timepoint");
  EXPECT_EQ(e.valid_range, (std::array<int, 2>{0, p[0].timepoints - 1}));
}

TEST(Service, Slices) {
  auto svc = make_service(false);
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto r = svc->slice({{"subject", id}, {"tp", "0"}, {"channel", "T1CE"}, {"axis", "axial"}, {"index", "8"}, {"overlay", "1"}});
  ASSERT_EQ(r.status, 200) << r.body;
  EXPECT_EQ(r.content_type, "image/png");
  EXPECT_EQ(r.body.substr(1, 3), "PNG");
  const auto oob = svc->slice({{"subject", id}, {"tp", "0"}, {"axis", "coronal"}, {"index", "16"}});
  EXPECT_EQ(oob.status, 400);
  const auto e = body(oob).get<wire::ErrorPayload>();
  EXPECT_EQ(e.error, "index_out_of_range");
  EXPECT_EQ(e.valid_range, (std::array<int, 2>{0, 15}));
  EXPECT_EQ(svc->slice({{"job", "j99"}}).status, 404);
  EXPECT_EQ(svc->slice({{"subject", id}}).status, 400);
}

TEST(Service, ModelEndpointsNeedAModel) {
  auto svc = make_service(false);
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto r = svc->whatif(whatif_body({{"subject", id}, {"timepoint", 0}, {"action", "AM"}, {"interval_days", 30}}));
  EXPECT_EQ(r.status, 503);
  EXPECT_EQ(body(r)["error"], "model_not_loaded");
  EXPECT_EQ(svc->suggest(json{{"subject", id}, {"timepoint", 0}}.dump()).status, 503);
}

TEST(Service, RequestValidation) {
  auto svc = make_service();
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  auto code = [&](json j) { return body(svc->whatif(j.dump()))["error"].get<std::string>(); };
  EXPECT_EQ(code({{"subject", id}, {"timepoint", 0}, {"action", "FOO"}, {"interval_days", 30}}), "invalid_action");
  EXPECT_EQ(code({{"subject", id}, {"timepoint", 0}, {"action", "AM"}, {"interval_days", 0}}), "invalid_interval");
  EXPECT_EQ(code({{"subject", id}, {"action", "AM"}, {"interval_days", 30}}), "bad_request");
  EXPECT_EQ(code({{"session", "s42"}, {"action", "AM"}, {"interval_days", 30}}), "unknown_session");
  EXPECT_EQ(code({{"branch", "j42"}, {"action", "AM"}, {"interval_days", 30}}), "unknown_job");
  EXPECT_EQ(svc->whatif("not json").status, 400);
  EXPECT_EQ(svc->job("j42").status, 404);
}

TEST(Service, ChainedWhatifsAccumulateDays) {
  auto svc = make_service();
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto first = finish(*svc, svc->whatif(whatif_body({{"subject", id}, {"timepoint", 0}, {"action", "SUR"}, {"interval_days", 30}, {"seed", 1}})));
  ASSERT_EQ(first.status, "done") << first.error.value_or("");
  EXPECT_EQ(first.result->day_offset, 30);
  const auto second = finish(*svc, svc->whatif(whatif_body({{"session", first.session}, {"action", "AM"}, {"interval_days", 31}, {"seed", 2}})));
  ASSERT_EQ(second.status, "done");
  EXPECT_EQ(second.session, first.session);
  EXPECT_EQ(second.result->step, 2);
  EXPECT_EQ(second.result->day_offset, 61);
  EXPECT_EQ(second.result->day, first.result->day + 31);
  EXPECT_EQ(svc->slice({{"job", second.job}, {"index", "3"}}).status, 200);
}

TEST(Service, SameRequestSameHash) {
  auto svc = make_service();
  const auto id = body(svc->patients())[1]["id"].get<std::string>();
  const json req{{"subject", id}, {"timepoint", 1}, {"action", "TMZ"}, {"interval_days", 45}, {"seed", 7}};
  const auto a = finish(*svc, svc->whatif(req.dump()));
  const auto b = finish(*svc, svc->whatif(req.dump()));
  EXPECT_NE(a.session, b.session);
  EXPECT_EQ(a.result->hash, b.result->hash);
  json other = req;
  other["seed"] = 8;
  EXPECT_NE(finish(*svc, svc->whatif(other.dump())).result->hash, a.result->hash);
}

TEST(Service, BranchingFromAJob) {
  auto svc = make_service();
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto base = finish(*svc, svc->whatif(whatif_body({{"subject", id}, {"timepoint", 0}, {"action", "SUR"}, {"interval_days", 30}, {"seed", 1}})));
  const json next{{"action", "AM"}, {"interval_days", 20}, {"seed", 3}};
  json cont = next, br = next;
  cont["session"] = base.session;
  br["branch"] = base.job;
  const auto a = finish(*svc, svc->whatif(cont.dump()));
  const auto b = finish(*svc, svc->whatif(br.dump()));
  EXPECT_NE(b.session, base.session);
  EXPECT_EQ(b.result->hash, a.result->hash);
  EXPECT_EQ(b.result->day_offset, 50);
  EXPECT_EQ(b.result->step, 2);
}

TEST(Service, BusySessionIsRetryable) {
  ServiceOptions opt;
  opt.sampler_steps = 400;
  auto svc = make_service(true, opt);
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto r = svc->whatif(whatif_body({{"subject", id}, {"timepoint", 0}, {"action", "AM"}, {"interval_days", 30}}));
  ASSERT_EQ(r.status, 202);
  const auto w = body(r).get<wire::WhatifResponse>();
  const auto busy = svc->whatif(whatif_body({{"session", w.session}, {"action", "AM"}, {"interval_days", 30}}));
  EXPECT_EQ(busy.status, 409);
  const auto e = body(busy).get<wire::ErrorPayload>();
  EXPECT_EQ(e.error, "session_busy");
  EXPECT_TRUE(e.retryable);
  const auto pending = svc->whatif(whatif_body({{"branch", w.job}, {"action", "AM"}, {"interval_days", 30}}));
  if (pending.status == 409) {
    EXPECT_EQ(body(pending)["error"], "job_not_done");
  }
  svc->wait_idle();
  EXPECT_EQ(svc->whatif(whatif_body({{"session", w.session}, {"action", "AM"}, {"interval_days", 30}})).status, 202);
  svc->wait_idle();
}

TEST(Service, ConcurrentSessionsAreIndependent) {
  auto svc = make_service();
  const auto pats = body(svc->patients());
  std::vector<std::string> jobs;
  for (int i = 0; i < 3; ++i) {
    const auto r = svc->whatif(whatif_body({{"subject", pats[i]["id"]}, {"timepoint", 0}, {"action", "CRT"}, {"interval_days", 40}}));
    ASSERT_EQ(r.status, 202);
    jobs.push_back(body(r)["job"].get<std::string>());
  }
  svc->wait_idle();
  for (const auto& j : jobs) {
    const auto v = body(svc->job(j)).get<wire::JobView>();
    EXPECT_EQ(v.status, "done") << v.error.value_or("");
    EXPECT_EQ(v.result->step, 1);
  }
}

TEST(Service, SuggestReturnsScoresOrNoPlan) {
  auto svc = make_service();
  const auto id = body(svc->patients())[0]["id"].get<std::string>();
  const auto r = svc->suggest(json{{"subject", id}, {"timepoint", 0}}.dump());
  if (r.status == 422) {
    EXPECT_EQ(body(r)["error"], "no_plan");
    return;
  }
  ASSERT_EQ(r.status, 200) << r.body;
  const auto s = body(r).get<wire::SuggestResponse>();
  EXPECT_FALSE(s.steps.empty());
  EXPECT_EQ(svc->slice({{"suggestion", s.id}, {"overlay", "1"}}).status, 200);
}

TEST(Service, Http) {
  auto svc = make_service(false);
  httplib::Server server;
  svc->mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  const auto p = cli.Get("/patients");
  ASSERT_TRUE(p);
  EXPECT_EQ(p->status, 200);
  const auto id = json::parse(p->body)[0]["id"].get<std::string>();
  const auto png = cli.Get("/slices?subject=" + id + "&tp=0&overlay=1");
  ASSERT_TRUE(png);
  EXPECT_EQ(png->status, 200);
  EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
  const auto nf = cli.Get("/nowhere");
  ASSERT_TRUE(nf);
  EXPECT_EQ(nf->status, 404);
  EXPECT_EQ(json::parse(nf->body)["error"], "not_found");
  const auto tp = cli.Get("/patients/" + id + "/timepoints/abc");
  ASSERT_TRUE(tp);
  EXPECT_EQ(tp->status, 404);
  const auto w = cli.Post("/whatif", json{{"subject", id}, {"timepoint", 0}, {"action", "AM"}, {"interval_days", 3}}.dump(),
                          "application/json");
  ASSERT_TRUE(w);
  EXPECT_EQ(w->status, 503);
  server.stop();
  th.join();
}
