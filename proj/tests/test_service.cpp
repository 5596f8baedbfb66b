#include <gtest/gtest.h>

#include "dcc/service.hpp"
#include "support.hpp"

using namespace dcc;
using namespace std::chrono_literals;
using testing_support::TempDir;

namespace {

std::shared_ptr<const Backbone> shared_toy() {
  static const std::shared_ptr<const Backbone> b = make_toy_backbone();
  return b;
}

service::Config fast_config(const std::filesystem::path& root) {
  service::Config c;
  c.storage_root = root;
  c.train.identity_steps = 2;
  c.train.style_steps = 2;
  c.train.batch_size = 2;
  c.sampling.steps = 4;
  return c;
}

std::string png_string(const Image& img) {
  const auto b = encode_png(img);
  return {b.begin(), b.end()};
}

nlohmann::json parse(const httplib::Result& r) { return nlohmann::json::parse(r->body); }

struct Running {
  TempDir dir{"svc"};
  std::unique_ptr<service::Service> svc;
  std::unique_ptr<httplib::Client> client;

  Running() { start(); }

  void start() {
    svc = std::make_unique<service::Service>(fast_config(dir.path), shared_toy());
    const int port = svc->listen_background("127.0.0.1", 0);
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(60, 0);
  }

  void restart() {
    client.reset();
    svc.reset();
    start();
  }

  std::string post_concept(const std::string& kind = "id", const std::string& superclass = "man") {
    httplib::MultipartFormDataItems items = {
        {"image", png_string(testing_support::face_image(32)), "face.png", "image/png"},
        {"superclass", superclass, "", ""},
        {"kind", kind, "", ""},
    };
    auto r = client->Post("/concepts", items);
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 202) << r->body;
    return parse(r).at("concept_id").get<std::string>();
  }

  nlohmann::json poll(const std::string& id, std::vector<std::string>* states = nullptr) {
    const auto until = std::chrono::steady_clock::now() + 120s;
    while (std::chrono::steady_clock::now() < until) {
      auto r = client->Get("/jobs/" + id);
      EXPECT_EQ(r->status, 200);
      auto j = parse(r);
      const std::string s = j.at("state");
      if (states && (states->empty() || states->back() != s)) states->push_back(s);
      if (s == "done" || s == "failed") return j;
      std::this_thread::sleep_for(5ms);
    }
    ADD_FAILURE() << "job " << id << " did not finish";
    return {};
  }

  std::string ready_concept(const std::string& kind = "id") {
    const auto id = post_concept(kind);
    EXPECT_EQ(poll(id).at("state"), "done");
    return id;
  }

  httplib::Result post_generate(const nlohmann::json& body) {
    return client->Post("/generate", body.dump(), "application/json");
  }
};

std::string sketch_b64(int size, int column = 12) {
  return base64_encode(encode_png(testing_support::line_sketch(size, column)));
}

std::vector<std::string> history_states(const nlohmann::json& job) {
  std::vector<std::string> s;
  for (const auto& h : job.at("history")) s.push_back(h.at("state"));
  return s;
}

}  // namespace

TEST(ServiceConfig, FileThenEnvironmentOverrides) {
  TempDir dir("cfg");
  const auto file = dir / "c.json";
  write_file_atomic(file, std::string(R"({"storage_root": "/a", "port": 9000, "steps": 7, "cfg": 3.5})"));
  unsetenv("DCC_STORAGE_ROOT");
  unsetenv("DCC_PORT");
  auto c = service::Config::load(file);
  EXPECT_EQ(c.storage_root, std::filesystem::path("/a"));
  EXPECT_EQ(c.port, 9000);
  EXPECT_EQ(c.sampling.steps, 7);
  EXPECT_DOUBLE_EQ(c.sampling.guidance, 3.5);
  setenv("DCC_STORAGE_ROOT", "/b", 1);
  setenv("DCC_PORT", "9100", 1);
  c = service::Config::load(file);
  EXPECT_EQ(c.storage_root, std::filesystem::path("/b"));
  EXPECT_EQ(c.port, 9100);
  setenv("DCC_PORT", "abc", 1);
  EXPECT_THROW(service::Config::load(file), std::invalid_argument);
  unsetenv("DCC_STORAGE_ROOT");
  unsetenv("DCC_PORT");
  write_file_atomic(file, std::string("{bad"));
  EXPECT_THROW(service::Config::load(file), FormatError);
  const auto d = service::Config::load(std::nullopt);
  EXPECT_EQ(d.sampling.steps, 50);
  EXPECT_DOUBLE_EQ(d.sampling.guidance, 9.0);
}

TEST(ServiceHttp, ConfigDescribesSketchContract) {
  Running s;
  auto r = s.client->Get("/config");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "application/json");
  const auto j = parse(r);
  EXPECT_EQ(j.at("image_size"), 32);
  EXPECT_EQ(j.at("sketch").at("width"), 32);
  EXPECT_EQ(j.at("sketch").at("height"), 32);
  EXPECT_EQ(j.at("sketch").at("channels"), 1);
  EXPECT_EQ(j.at("backbone").at("fingerprint"), shared_toy()->info().fingerprint());
  EXPECT_EQ(j.at("backbone").at("layers"), 4);
  EXPECT_DOUBLE_EQ(j.at("defaults").at("scale").get<double>(), 1.2);
  EXPECT_EQ(j.at("defaults").at("steps"), 4);
}

TEST(ServiceHttp, FinetuneThenGenerateStateMachine) {
  Running s;
  std::vector<std::string> seen;
  const auto cid = s.post_concept();
  const auto cj = s.poll(cid, &seen);
  EXPECT_EQ(cj.at("state"), "done");
  EXPECT_EQ(history_states(cj), (std::vector<std::string>{"queued", "running", "done"}));
  EXPECT_DOUBLE_EQ(cj.at("progress").get<double>(), 1.0);
  EXPECT_EQ(cj.at("results").size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(s.dir / ("concepts/" + cid + ".dcc")));
  // Whatever subset of states the poller saw is in machine order.
  const std::vector<std::string> order{"queued", "running", "done"};
  std::size_t k = 0;
  for (const auto& st : seen) {
    while (k < order.size() && order[k] != st) ++k;
    EXPECT_LT(k, order.size()) << st;
  }

  auto r = s.post_generate({{"concepts", {{"identity", cid}}},
                            {"scales", {{"identity", 0.8}}},
                            {"sampling", {{"steps", 3}, {"seed", 5}}},
                            {"sketch", sketch_b64(32)}});
  ASSERT_EQ(r->status, 202) << r->body;
  const std::string gid = parse(r).at("job_id");
  const auto gj = s.poll(gid);
  ASSERT_EQ(gj.at("state"), "done") << gj.dump();
  EXPECT_EQ(history_states(gj), (std::vector<std::string>{"queued", "running", "done"}));
  EXPECT_DOUBLE_EQ(gj.at("request").at("identity_scale").get<double>(), 0.8);
  EXPECT_EQ(gj.at("request").at("steps"), 3);
  auto png = s.client->Get("/results/" + gid);
  ASSERT_EQ(png->status, 200);
  EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
  const Image img = decode_png(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(png->body.data()), png->body.size()));
  EXPECT_EQ(img.width, 32);
  EXPECT_EQ(img.height, 32);
}

TEST(ServiceHttp, IdenticalGeneratesAreByteIdentical) {
  Running s;
  const auto cid = s.ready_concept();
  const nlohmann::json body = {{"identity", cid}, {"seed", 42}, {"steps", 4}, {"sketch", sketch_b64(32)}};
  std::vector<std::string> pngs;
  for (int i = 0; i < 2; ++i) {
    auto r = s.post_generate(body);
    ASSERT_EQ(r->status, 202);
    const std::string id = parse(r).at("job_id");
    ASSERT_EQ(s.poll(id).at("state"), "done");
    pngs.push_back(s.client->Get("/results/" + id)->body);
  }
  EXPECT_FALSE(pngs[0].empty());
  EXPECT_EQ(pngs[0], pngs[1]);
  auto r = s.post_generate({{"identity", cid}, {"seed", 43}, {"steps", 4}, {"sketch", sketch_b64(32)}});
  const std::string id = parse(r).at("job_id");
  s.poll(id);
  EXPECT_NE(s.client->Get("/results/" + id)->body, pngs[0]);
}

TEST(ServiceHttp, MultipartGenerateWithSketchFile) {
  Running s;
  const auto cid = s.ready_concept("style");
  httplib::MultipartFormDataItems items = {
      {"request", nlohmann::json({{"style", cid}, {"steps", 2}}).dump(), "", "application/json"},
      {"sketch", png_string(testing_support::line_sketch(32, 5)), "sketch.png", "image/png"},
  };
  auto r = s.client->Post("/generate", items);
  ASSERT_EQ(r->status, 202) << r->body;
  const std::string id = parse(r).at("job_id");
  const auto j = s.poll(id);
  EXPECT_EQ(j.at("state"), "done");
  EXPECT_TRUE(j.at("request").contains("sketch"));
  EXPECT_FALSE(j.at("request").contains("identity"));
}

TEST(ServiceHttp, ErrorStatuses) {
  Running s;
  // 400: malformed payloads.
  EXPECT_EQ(s.client->Post("/generate", "{not json", "application/json")->status, 400);
  EXPECT_EQ(s.post_generate({{"seed", 1}})->status, 400);
  EXPECT_EQ(s.post_generate(nlohmann::json::array())->status, 400);
  EXPECT_EQ(s.client->Post("/concepts", "x", "text/plain")->status, 400);
  {
    httplib::MultipartFormDataItems items = {{"superclass", "man", "", ""}, {"kind", "id", "", ""}};
    auto r = s.client->Post("/concepts", items);
    EXPECT_EQ(r->status, 400);
    EXPECT_NE(r->body.find("image"), std::string::npos);
  }
  {
    httplib::MultipartFormDataItems items = {
        {"image", "garbage", "a.png", "image/png"}, {"superclass", "man", "", ""}, {"kind", "id", "", ""}};
    EXPECT_EQ(s.client->Post("/concepts", items)->status, 400);
  }
  {
    httplib::MultipartFormDataItems items = {{"image", png_string(testing_support::face_image(32)), "a.png", "image/png"},
                                             {"superclass", "man", "", ""},
                                             {"kind", "portrait", "", ""}};
    EXPECT_EQ(s.client->Post("/concepts", items)->status, 400);
  }
  // 404: unknown ids.
  EXPECT_EQ(s.client->Get("/jobs/nope")->status, 404);
  EXPECT_EQ(s.client->Get("/results/nope")->status, 404);
  EXPECT_EQ(s.client->Get("/jobs/..%2Fetc")->status, 404);
  EXPECT_EQ(s.post_generate({{"identity", "nope"}})->status, 404);
  // 422: wrong resolution, with the expected size in the message.
  {
    httplib::MultipartFormDataItems items = {{"image", png_string(testing_support::face_image(16)), "a.png", "image/png"},
                                             {"superclass", "man", "", ""},
                                             {"kind", "id", "", ""}};
    auto r = s.client->Post("/concepts", items);
    EXPECT_EQ(r->status, 422);
    EXPECT_NE(parse(r).at("error").get<std::string>().find("expected 32x32"), std::string::npos) << r->body;
  }
  const auto cid = s.ready_concept();
  auto r = s.post_generate({{"identity", cid}, {"sketch", sketch_b64(16, 3)}});
  EXPECT_EQ(r->status, 422);
  EXPECT_NE(parse(r).at("error").get<std::string>().find("expected 32x32"), std::string::npos) << r->body;
  EXPECT_EQ(s.post_generate({{"identity", cid}, {"sketch", "!!!"}})->status, 400);
  EXPECT_EQ(s.post_generate({{"identity", cid}, {"steps", 0}})->status, 400);
  EXPECT_EQ(s.post_generate({{"identity", cid}, {"cfg", -1}})->status, 400);
  // A finetune job's id is not an image result.
  EXPECT_EQ(s.client->Get("/results/" + cid)->status, 404);
}

TEST(ServiceHttp, GenerateAgainstUnfinishedConceptIs409) {
  TempDir dir("svc409");
  service::Config cfg = fast_config(dir.path);
  cfg.train.identity_steps = 100;
  service::Service svc(cfg, shared_toy());
  const int port = svc.listen_background("127.0.0.1", 0);
  httplib::Client client("127.0.0.1", port);
  httplib::MultipartFormDataItems items = {{"image", png_string(testing_support::face_image(32)), "a.png", "image/png"},
                                           {"superclass", "man", "", ""},
                                           {"kind", "id", "", ""}};
  const std::string cid = nlohmann::json::parse(client.Post("/concepts", items)->body).at("concept_id");
  auto r = client.Post("/generate", nlohmann::json({{"identity", cid}}).dump(), "application/json");
  EXPECT_EQ(r->status, 409);
  EXPECT_NE(r->body.find("not finished"), std::string::npos);
  EXPECT_EQ(client.Get("/results/" + cid)->status, 404);
  auto list = nlohmann::json::parse(client.Get("/concepts")->body);
  ASSERT_EQ(list.size(), 1u);
  EXPECT_NE(list[0].at("state"), "done");
}

TEST(ServiceHttp, FailedJobResultIs404WithDetail) {
  Running s;
  const auto cid = s.ready_concept();
  auto r = s.post_generate({{"identity", cid}, {"steps", 2}});
  const std::string ok = parse(r).at("job_id");
  ASSERT_EQ(s.poll(ok).at("state"), "done");
  // Corrupt the stored concept so the next generate fails while loading it.
  write_file_atomic(s.dir / ("concepts/" + cid + ".dcc"), std::string("broken"));
  r = s.post_generate({{"identity", cid}, {"steps", 2}});
  ASSERT_EQ(r->status, 202);
  const std::string bad = parse(r).at("job_id");
  const auto j = s.poll(bad);
  EXPECT_EQ(j.at("state"), "failed");
  EXPECT_EQ(history_states(j), (std::vector<std::string>{"queued", "running", "failed"}));
  EXPECT_TRUE(j.at("results").empty());
  const std::string error = j.at("error");
  EXPECT_NE(error.find("loading concepts"), std::string::npos) << error;
  auto res = s.client->Get("/results/" + bad);
  EXPECT_EQ(res->status, 404);
  EXPECT_NE(parse(res).at("error").get<std::string>().find(error), std::string::npos);
}

TEST(ServiceHttp, FailedConceptBlocksGenerateWith409) {
  Running s;
  // Mark the finished concept job as failed directly in storage.
  const auto cid = s.ready_concept();
  auto rec = s.svc->storage().load(cid);
  ASSERT_TRUE(rec);
  rec->state = service::JobState::failed;
  rec->error = "fine-tuning: synthetic failure";
  s.svc->storage().save(*rec);
  auto r = s.post_generate({{"identity", cid}});
  EXPECT_EQ(r->status, 409);
  EXPECT_NE(r->body.find("synthetic failure"), std::string::npos);
}

TEST(ServiceHttp, ConceptListing) {
  Running s;
  const auto a = s.ready_concept("id");
  const auto b = s.ready_concept("style");
  auto list = parse(s.client->Get("/concepts"));
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[0].at("id"), a);
  EXPECT_EQ(list[0].at("kind"), "identity");
  EXPECT_EQ(list[0].at("superclass"), "man");
  EXPECT_EQ(list[1].at("id"), b);
  EXPECT_EQ(list[1].at("kind"), "style");
  EXPECT_EQ(list[1].at("state"), "done");
  EXPECT_DOUBLE_EQ(list[1].at("default_scale").get<double>(), 1.2);
}

TEST(ServiceHttp, JobsRunOneAtATimeInFifoOrder) {
  Running s;
  const auto cid = s.ready_concept();
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(parse(s.post_generate({{"identity", cid}, {"steps", 3}, {"seed", i}})).at("job_id"));
  std::vector<nlohmann::json> jobs;
  for (const auto& id : ids) jobs.push_back(s.poll(id));
  for (std::size_t i = 1; i < jobs.size(); ++i) {
    EXPECT_GT(jobs[i].at("sequence").get<std::uint64_t>(), jobs[i - 1].at("sequence").get<std::uint64_t>());
    EXPECT_GE(jobs[i].at("started_ms").get<std::int64_t>(), jobs[i - 1].at("finished_ms").get<std::int64_t>());
  }
}

TEST(ServiceHttp, RestartPreservesResultsAndRecoversJobs) {
  Running s;
  const auto cid = s.ready_concept();
  const std::string gid = parse(s.post_generate({{"identity", cid}, {"steps", 2}})).at("job_id");
  ASSERT_EQ(s.poll(gid).at("state"), "done");
  const std::string before = s.client->Get("/results/" + gid)->body;
  s.svc->stop();

  // Simulate a crash mid-job and a job that never started.
  service::Storage store(s.dir.path);
  auto interrupted = *store.load(gid);
  interrupted.id = "0000000000a-0000-00000001";
  interrupted.state = service::JobState::running;
  interrupted.sequence = 100;
  interrupted.results.clear();
  store.save(interrupted);
  auto pending = *store.load(gid);
  pending.id = "0000000000b-0000-00000002";
  pending.state = service::JobState::queued;
  pending.sequence = 101;
  pending.results.clear();
  pending.history = {{service::JobState::queued, 1}};
  store.save(pending);

  s.restart();
  EXPECT_EQ(s.client->Get("/results/" + gid)->body, before);
  auto list = parse(s.client->Get("/concepts"));
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0].at("id"), cid);
  const auto ij = parse(s.client->Get("/jobs/" + interrupted.id));
  EXPECT_EQ(ij.at("state"), "failed");
  EXPECT_NE(ij.at("error").get<std::string>().find("interrupted"), std::string::npos);
  const auto pj = s.poll(pending.id);
  EXPECT_EQ(pj.at("state"), "done");
  EXPECT_EQ(s.client->Get("/results/" + pending.id)->body, before);
  // New jobs continue the sequence.
  const std::string next = parse(s.post_generate({{"identity", cid}, {"steps", 2}})).at("job_id");
  EXPECT_GT(s.poll(next).at("sequence").get<std::uint64_t>(), 101u);
}

TEST(ServiceStorage, JobRecordRoundTrip) {
  TempDir dir("store");
  service::Storage store(dir.path);
  service::Job j;
  j.id = "abc-1";
  j.kind = service::JobKind::finetune;
  j.state = service::JobState::done;
  j.sequence = 7;
  j.request = {{"superclass", "man"}};
  j.results = {"concepts/abc-1.dcc"};
  j.progress = 1.0;
  j.history = {{service::JobState::queued, 1}, {service::JobState::running, 2}, {service::JobState::done, 3}};
  store.save(j);
  const auto r = store.load("abc-1");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->to_json(), j.to_json());
  EXPECT_FALSE(store.load("../abc-1"));
  EXPECT_FALSE(store.load("missing"));
  write_file_atomic(dir / "jobs/zzz.json", std::string("{"));
  EXPECT_EQ(store.list().size(), 1u);
}
