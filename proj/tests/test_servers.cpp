#include <gtest/gtest.h>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <thread>

#include "inspect/data.hpp"
#include "inspect/servers.hpp"
#include "inspect/wire_json.hpp"

using namespace inspect;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int free_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a);
  socklen_t len = sizeof a;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
  ::close(fd);
  return ntohs(a.sin_port);
}

SyntheticLineConfig tiny_line() {
  SyntheticLineConfig c;
  c.name = "api";
  c.height = c.width = 10;
  c.seed = 21;
  return c;
}

json body_of(const httplib::Result& r) { return json::parse(r->body); }

template <typename Pred>
bool eventually(Pred p, int ms = 20000) {
  const auto end = std::chrono::steady_clock::now() + std::chrono::milliseconds(ms);
  while (std::chrono::steady_clock::now() < end) {
    if (p()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return p();
}

// Main plus one edge wired over real sockets on loopback.
class Cluster : public ::testing::Test {
 protected:
  void SetUp() override {
    edge_api = free_port();
    MainServerConfig mc;
    mc.alpha = 0.5;
    mc.beta = 0.2;
    mc.re_train = {1.0, 30};
    mc.api = {"127.0.0.1", 0};
    mc.edges = {{"127.0.0.1", edge_api}};
    mc.push_attempts = 3;
    mc.push_backoff_ms = 10;
    main_node = std::make_unique<MainNode>(mc, registry, Dataset{"d", generate_balanced(tiny_line(), 0, 10, 10)});
    main_node->bootstrap();
    main_server = std::make_unique<MainServer>(*main_node);

    EdgeServerConfig ec;
    ec.line_id = "line-t";
    ec.alpha = 0.5;  // every prediction goes to review
    ec.registry = "unused";
    ec.main = Endpoint{"127.0.0.1", main_server->port()};
    ec.listen = {"127.0.0.1", 0};
    ec.api = {"127.0.0.1", edge_api};
    ec.fine_tune = {0.05, 5};
    boot = std::make_unique<EdgeBoot>(boot_edge(ec));
    edge_node = std::make_unique<EdgeNode>(ec, boot->deployment, boot->register_fn);
    edge_server = std::make_unique<EdgeServer>(*edge_node, boot->main.get());
    edge = std::make_unique<httplib::Client>("127.0.0.1", edge_api);
    edge->set_read_timeout(60, 0);
    main_http = std::make_unique<httplib::Client>("127.0.0.1", main_server->port());
  }

  void TearDown() override {
    edge_server->stop();
    main_server->stop();
  }

  // Sends `n` products of `tick` through the line protocol.
  std::vector<Sample> send_products(int tick, std::size_t n) {
    EdgeLink link({"127.0.0.1", edge_server->line_port()}, 5000);
    auto products = generate_line_images(tiny_line(), tick, n, 9);
    for (const auto& p : products) {
      const auto reply = link.ask(make_image_sending(p.id, p.image));
      EXPECT_TRUE(reply.has_value());
      if (reply) EXPECT_EQ(reply->kind, MessageKind::deep_prediction);
    }
    return products;
  }

  httplib::Result decide(const json& d) { return edge->Post("/api/v1/decisions", d.dump(), "application/json"); }

  int edge_api = 0;
  ModelRegistry registry;
  std::unique_ptr<MainNode> main_node;
  std::unique_ptr<MainServer> main_server;
  std::unique_ptr<EdgeBoot> boot;
  std::unique_ptr<EdgeNode> edge_node;
  std::unique_ptr<EdgeServer> edge_server;
  std::unique_ptr<httplib::Client> edge;
  std::unique_ptr<httplib::Client> main_http;
};

}  // namespace

TEST_F(Cluster, ReviewLoopFineTunesThenRetrains) {
  ASSERT_EQ(body_of(edge->Get("/api/v1/model"))["version"], 1);
  send_products(0, 6);

  const auto pending = body_of(edge->Get("/api/v1/pending"));
  ASSERT_EQ(pending["items"].size(), 6u);
  for (const auto& item : pending["items"]) {
    const auto img = wire::image_from_json(item["image"]);
    EXPECT_EQ(img.height, 10);
    EXPECT_EQ(img.width, 10);
    const auto sal = wire::saliency_from_json(item["saliency"]);
    EXPECT_EQ(sal.mass.size(), 100u);
    const double p = item["probability"].get<double>();
    EXPECT_EQ(item["y_pred"].get<int>(), p >= 0.5 ? 1 : 0);
  }
  const auto& first = pending["items"][0];
  const auto& second = pending["items"][1];
  const int flip = 1 - first["y_pred"].get<int>();

  auto r = decide({{"sample_id", first["id"]}, {"stage1", "label_wrong"}});
  ASSERT_EQ(r->status, 400);
  EXPECT_EQ(body_of(r)["error"], "malformed_decision");
  EXPECT_FALSE(body_of(r)["reason"].get<std::string>().empty());
  EXPECT_EQ(edge->Post("/api/v1/decisions", "{nope", "application/json")->status, 400);
  EXPECT_EQ(decide({{"sample_id", "ghost"}, {"stage1", "label_right"}, {"stage2", {{"G", 1}}}})->status, 404);

  const json good{{"sample_id", first["id"]}, {"stage1", "label_wrong"}, {"y_gt", flip}};
  r = decide(good);
  ASSERT_EQ(r->status, 200);
  EXPECT_TRUE(body_of(r)["applied"].get<bool>());
  r = decide(good);
  ASSERT_EQ(r->status, 200);
  EXPECT_FALSE(body_of(r)["applied"].get<bool>());
  EXPECT_EQ(decide({{"sample_id", first["id"]}, {"stage1", "label_right"}, {"stage2", {{"G", 1}}}})->status, 409);
  ASSERT_EQ(decide({{"sample_id", second["id"]}, {"stage1", "label_right"}, {"stage2", {{"G", 0}}}})->status, 200);
  EXPECT_EQ(body_of(edge->Get("/api/v1/pending"))["items"].size(), 4u);

  const auto failed = body_of(edge->Get("/api/v1/failed"));
  EXPECT_EQ(failed["prediction_failed"].size(), 1u);
  EXPECT_EQ(failed["poorly_explained"].size(), 1u);
  EXPECT_EQ(failed["prediction_failed"][0]["y_gt"], flip);
  EXPECT_EQ(failed["poorly_explained"][0]["y_gt"], second["y_pred"]);

  // 2 of 20 failed: fine-tune on the edge, registered on main.
  auto tick = body_of(edge->Post("/api/v1/tick", json{{"scrap_or_repair", 2}, {"next_process", 4}}.dump(),
                                 "application/json"));
  EXPECT_EQ(tick["action"], "fine_tune");
  EXPECT_DOUBLE_EQ(tick["fsr"].get<double>(), 0.1);
  EXPECT_EQ(edge_node->queued(), 1u);
  edge->Post("/api/v1/idle", R"({"idle": true})", "application/json");
  ASSERT_TRUE(eventually([&] { return body_of(edge->Get("/api/v1/model"))["version"] == 2; }));
  auto lineage = body_of(edge->Get("/api/v1/lineage"));
  ASSERT_EQ(lineage["entries"].size(), 2u);
  EXPECT_EQ(lineage["entries"][1]["origin"], "fine_tune");
  EXPECT_EQ(lineage["entries"][1]["parent"], 1);

  // 5 more distinct failures push FSR to 7/20 > 0.2: re-train on main, pushed to the edge.
  send_products(1, 6);
  const auto items = body_of(edge->Get("/api/v1/pending"))["items"];
  ASSERT_EQ(items.size(), 6u);
  for (std::size_t i = 0; i < 5; ++i) {
    ASSERT_EQ(decide({{"sample_id", items[i]["id"]}, {"stage1", "label_wrong"}, {"y_gt", 1 - items[i]["y_pred"].get<int>()}})
                  ->status,
              200);
  }
  tick = body_of(edge->Post("/api/v1/tick", "{}", "application/json"));
  EXPECT_EQ(tick["action"], "re_train");
  EXPECT_DOUBLE_EQ(tick["fsr"].get<double>(), 0.35);
  ASSERT_EQ(tick["main"]["pushes"].size(), 1u);
  EXPECT_TRUE(tick["main"]["pushes"][0]["ok"].get<bool>());
  EXPECT_EQ(tick["main"]["new_version"], 3);
  EXPECT_EQ(body_of(edge->Get("/api/v1/model"))["version"], 3);
  lineage = body_of(main_http->Get("/api/v1/lineage"));
  EXPECT_EQ(lineage["deployed"], 3);
  EXPECT_EQ(lineage["entries"][2]["origin"], "re_train");

  const auto main_metrics = body_of(main_http->Get("/api/v1/metrics"));
  EXPECT_EQ(main_metrics["retrains"], 1);
  EXPECT_EQ(main_metrics["training_size"], 27);

  const auto metrics = body_of(edge->Get("/api/v1/metrics"));
  ASSERT_EQ(metrics["series"].size(), 2u);
  EXPECT_EQ(metrics["series"][0]["buffers"]["scrap_or_repair"], 2);
  EXPECT_EQ(metrics["series"][0]["buffers"]["next_process"], 4);
  EXPECT_EQ(metrics["series"][0]["action"], "fine_tune");
  EXPECT_EQ(metrics["series"][1]["action"], "re_train");
  EXPECT_TRUE(metrics["series"][1].contains("frozen_accuracy"));
  EXPECT_TRUE(metrics["series"][1].contains("fsr"));
}

TEST_F(Cluster, MainRejectsBadRequests) {
  EXPECT_EQ(main_http->Get("/api/v1/models/99")->status, 404);
  const auto r = main_http->Get("/api/v1/models/1");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("X-Weight-Digest"), registry.get(1).digest);
  EXPECT_EQ(main_http->Post("/api/v1/reports", "{}", "application/json")->status, 400);
  EXPECT_EQ(main_http->Post("/api/v1/registry", R"({"origin":"fine_tune"})", "application/json")->status, 400);
  EXPECT_EQ(edge->Post("/api/v1/model", "INSPW1", "application/octet-stream")->status, 400);
}

TEST(EdgeBootTest, RefusesToStartWithoutModel) {
  const auto dir = fs::temp_directory_path() / "inspect-test-empty-registry";
  fs::remove_all(dir);
  EdgeServerConfig c;
  c.registry = dir.string();
  EXPECT_THROW(boot_edge(c), ConfigError);
  c.model_version = 4;
  {
    ModelRegistry r(dir);
    r.add(make_model(ModelKind::classifier, {10, 10, 1}, 1), Origin::initial, std::nullopt);
  }
  EXPECT_THROW(boot_edge(c), ConfigError);
  c.model_version.reset();
  EXPECT_EQ(boot_edge(c).deployment.registry_version, 1u);
  fs::remove_all(dir);
}

TEST(StandaloneEdge, FineTunesEveryNonemptySetLocally) {
  const auto dir = fs::temp_directory_path() / "inspect-test-standalone";
  fs::remove_all(dir);
  {
    ModelRegistry r(dir);
    r.add(make_model(ModelKind::classifier, {10, 10, 1}, 1), Origin::initial, std::nullopt);
  }
  EdgeServerConfig c;
  c.registry = dir.string();
  c.alpha = 0.5;
  c.listen = {"127.0.0.1", 0};
  c.api = {"127.0.0.1", 0};
  auto boot = boot_edge(c);
  c.api.port = free_port();
  EdgeNode node(c, boot.deployment, boot.register_fn);
  node.set_idle(true);
  EdgeServer server(node, nullptr, boot.local.get());
  httplib::Client cli("127.0.0.1", c.api.port);
  const auto s = generate_line_images(tiny_line(), 0, 1)[0];
  const auto reply = node.handle(make_image_sending(s.id, s.image));
  ASSERT_TRUE(reply);
  ASSERT_EQ(cli.Post("/api/v1/decisions",
                     json{{"sample_id", s.id}, {"stage1", "label_wrong"}, {"y_gt", 1 - reply->prediction->label}}.dump(),
                     "application/json")
                ->status,
            200);
  EXPECT_EQ(body_of(cli.Post("/api/v1/tick", "{}", "application/json"))["action"], "fine_tune");
  ASSERT_TRUE(eventually([&] { return body_of(cli.Get("/api/v1/model"))["version"] == 2; }));
  EXPECT_EQ(body_of(cli.Get("/api/v1/lineage"))["deployed"], 2);
  EXPECT_EQ(body_of(cli.Post("/api/v1/tick", "{}", "application/json"))["action"], "none");
  server.stop();
  fs::remove_all(dir);
}

TEST(PushModel, RetriesWithBackoffAgainstUnreachableEdge) {
  const Bytes w = encode_weights(make_model(ModelKind::classifier, {8, 8, 1}, 1));
  const auto start = std::chrono::steady_clock::now();
  const auto r = push_model({"127.0.0.1", free_port()}, 1, w, 3, 20);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.attempts, 3);
  EXPECT_GE(ms, 20 + 40);
}

TEST(EdgeLinkTest, RoundTripAndBudgetTimeout) {
  net::FrameServer echo("127.0.0.1", 0, [](const ProtocolMessage& m) -> std::optional<ProtocolMessage> {
    if (m.product_id == "slow") std::this_thread::sleep_for(std::chrono::milliseconds(300));
    if (m.product_id == "mute") return std::nullopt;
    return make_deep_prediction(m.product_id, {1, 0.8}, 7);
  });
  EdgeLink link({"127.0.0.1", echo.port()}, 100);
  TensorImage img(4, 4, 1, 0.2);
  const auto ok = link.ask(make_image_sending("p1", img));
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->model_version, 7u);
  EXPECT_FALSE(link.ask(make_image_sending("slow", img)));
  EXPECT_FALSE(link.ask(make_image_sending("mute", img)));
  // The late reply for "slow" is skipped, not mistaken for this one.
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  const auto next = link.ask(make_image_sending("p2", img));
  ASSERT_TRUE(next);
  EXPECT_EQ(next->product_id, "p2");
  echo.stop();
}

TEST(WireJson, DecisionAndFailedSetRoundTrip) {
  const ReviewDecision d{"x", Stage1::label_right, std::nullopt, 0, "alice", 5};
  EXPECT_EQ(wire::decision_from_json(wire::decision_to_json(d)), d);
  EXPECT_THROW(wire::decision_from_json(json{{"sample_id", "x"}, {"stage1", "maybe"}}), MalformedDecision);
  FailedSampleSet set;
  set.tick = 3;
  auto s = generate_line_images(tiny_line(), 0, 1)[0];
  set.members.push_back({s, s.label, FailureKind::poorly_explained});
  const auto back = wire::failed_set_from_json(wire::failed_set_to_json(set));
  EXPECT_EQ(back.tick, 3u);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back.members[0].sample, s);
  EXPECT_EQ(back.members[0].kind, FailureKind::poorly_explained);
  const std::vector<std::uint8_t> raw{0, 1, 2, 250, 255};
  EXPECT_EQ(wire::base64_decode(wire::base64_encode(raw)), raw);
  EXPECT_EQ(wire::base64_encode(Bytes{'f', 'o', 'o'}), "Zm9v");
}
