// Serves a synthetic predictor over the stdio wire protocol.
//
//   cfx_predict_server --spec predictor.json
//   cfx_predict_server --spec '{"kind":"linear", ...}'
//
// Malformed frames get an error frame and the loop continues. Exits 0 on EOF
// at a frame boundary, 2 on a truncated stream.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfx/error.hpp"
#include "cfx/predictor.hpp"
#include "cfx/wire.hpp"

namespace {

cfx::PredictorPtr load_spec(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') {
    return cfx::make_synthetic_predictor(nlohmann::json::parse(arg));
  }
  std::ifstream in(arg);
  if (!in) throw cfx::UsageError("cannot open predictor spec " + arg);
  const std::filesystem::path p(arg);
  return cfx::make_synthetic_predictor(nlohmann::json::parse(in), p.parent_path());
}

cfx::wire::Frame handle(const cfx::Predictor& h, const nlohmann::ordered_json& header,
                        const std::vector<float>& payload) {
  const auto op = header.at("op").get<std::string>();
  if (op == "hello") return cfx::wire::hello_reply(h.num_classes());
  if (op != "predict") return cfx::wire::error_frame("unknown op '" + op + "'");
  const auto n = header.at("n").get<std::size_t>();
  const auto c = header.at("c").get<std::size_t>();
  const auto hh = header.at("h").get<std::size_t>();
  const auto w = header.at("w").get<std::size_t>();
  std::vector<cfx::ImageTensor> batch;
  batch.reserve(n);
  const std::size_t per = c * hh * w;
  for (std::size_t i = 0; i < n; ++i) {
    batch.emplace_back(c, hh, w,
                       std::vector<float>(payload.begin() + i * per, payload.begin() + (i + 1) * per));
  }
  const auto preds = cfx::predict_batch(h, batch);
  cfx::wire::Frame reply{{{"op", "scores"}, {"n", n}, {"k", h.num_classes()}}, {}};
  for (const auto& p : preds) {
    for (double s : p.class_scores) reply.payload.push_back(static_cast<float>(s));
  }
  return reply;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic predictor server (stdio wire protocol)"};
  std::string spec;
  app.add_option("--spec", spec, "Predictor spec: JSON file or inline JSON object")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;  // every parse failure is a usage error
  }

  cfx::PredictorPtr h;
  try {
    h = load_spec(spec);
  } catch (const cfx::Error& e) {
    std::cerr << "cfx_predict_server: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "cfx_predict_server: bad spec: " << e.what() << '\n';
    return 1;
  }

  cfx::wire::FdReader in(0);
  cfx::wire::FdWriter out(1);
  try {
    while (true) {
      const auto raw = cfx::wire::read_header_bytes(in);
      if (!raw) return 0;
      if (raw->empty()) {
        cfx::wire::write_frame(out, cfx::wire::error_frame("empty frame header"));
        continue;
      }
      nlohmann::ordered_json header;
      try {
        header = nlohmann::ordered_json::parse(*raw);
      } catch (const nlohmann::json::exception&) {
        cfx::wire::write_frame(out, cfx::wire::error_frame("frame header is not valid JSON"));
        continue;
      }
      std::size_t floats = 0;
      try {
        floats = cfx::wire::payload_floats(header);
      } catch (const cfx::TransportError& e) {
        cfx::wire::write_frame(out, cfx::wire::error_frame(e.what()));
        continue;
      }
      const auto payload = cfx::wire::read_payload(in, floats);
      cfx::wire::Frame reply;
      try {
        reply = handle(*h, header, payload);
      } catch (const std::exception& e) {
        reply = cfx::wire::error_frame(e.what());
      }
      cfx::wire::write_frame(out, reply);
    }
  } catch (const cfx::TransportError& e) {
    std::cerr << "cfx_predict_server: " << e.what() << '\n';
    return 2;
  }
}
