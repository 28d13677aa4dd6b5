#include "cardioseg/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace cardioseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

void SweepSpec::validate() const {
  if (kind == MaskKind::None) throw ConfigError("sweep.mask_kind must be ideal or gaussian");
  if (lambdas.empty()) throw ConfigError("sweep.lambdas must not be empty");
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] > 0.0 && lambdas[i] < 1.0))
      throw ConfigError("sweep lambda " + std::to_string(lambdas[i]) + " is outside (0, 1)");
    if (i > 0 && !(lambdas[i] > lambdas[i - 1])) throw ConfigError("sweep.lambdas must be strictly increasing");
  }
  if (!arm.key) throw ConfigError("sweep.arm must be an ITD arm; masks are unused under CTD");
  if (runs < 1) throw ConfigError("sweep.runs must be at least 1");
}

namespace {

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
}

}  // namespace

AppConfig app_config_from_json(const json& j) {
  AppConfig c;
  try {
    reject_unknown(j, "config", {"seed", "data", "model", "train", "mask", "optim", "eval", "sweep", "synth"});
    c.train.seed = j.value("seed", c.train.seed);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, "data", {"train_manifest", "test_manifest"});
      c.data.train_manifest = d.value("train_manifest", c.data.train_manifest);
      c.data.test_manifest = d.value("test_manifest", c.data.test_manifest);
    }
    if (j.contains("model")) {
      reject_unknown(j.at("model"), "model",
                     {"depth", "base_channels", "num_classes", "attention", "attention_heads", "input_size"});
      c.train.model = model_config_from_json(j.at("model"), c.train.model);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      reject_unknown(t, "train", {"epochs", "batch_size", "runs", "normalize", "arms", "jobs"});
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.runs = t.value("runs", c.train.runs);
      c.train.normalize = t.value("normalize", c.train.normalize);
      c.jobs = t.value("jobs", c.jobs);
      if (t.contains("arms")) {
        c.arms.clear();
        for (const auto& a : t.at("arms")) c.arms.push_back(parse_arm(a.get<std::string>()));
      }
    }
    c.eval_normalize = c.train.normalize;
    if (j.contains("mask")) {
      const auto& m = j.at("mask");
      reject_unknown(m, "mask", {"kind", "lambda", "paper_literal_center_range"});
      c.train.mask.kind = parse_mask_kind(m.value("kind", std::string(mask_kind_name(c.train.mask.kind))));
      c.train.mask.lambda = m.value("lambda", c.train.mask.lambda);
      c.train.mask.paper_literal_center_range =
          m.value("paper_literal_center_range", c.train.mask.paper_literal_center_range);
    }
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      reject_unknown(o, "optim", {"lr", "betas", "eps"});
      c.train.optim.lr = o.value("lr", c.train.optim.lr);
      if (o.contains("betas")) {
        c.train.optim.beta1 = o.at("betas").at(0).get<double>();
        c.train.optim.beta2 = o.at("betas").at(1).get<double>();
      }
      c.train.optim.eps = o.value("eps", c.train.optim.eps);
    }
    if (j.contains("eval")) {
      reject_unknown(j.at("eval"), "eval", {"normalize"});
      c.eval_normalize = j.at("eval").value("normalize", c.eval_normalize);
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      reject_unknown(s, "sweep", {"mask_kind", "lambdas", "arm", "runs"});
      c.sweep.kind = parse_mask_kind(s.value("mask_kind", std::string(mask_kind_name(c.sweep.kind))));
      if (s.contains("lambdas")) c.sweep.lambdas = s.at("lambdas").get<std::vector<double>>();
      if (s.contains("arm")) c.sweep.arm = parse_arm(s.at("arm").get<std::string>());
      c.sweep.runs = s.value("runs", c.sweep.runs);
    }
    c.synth = synth_config_from_json(j.contains("synth") ? j.at("synth") : json::object());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (c.arms.empty()) throw ConfigError("train.arms must not be empty");
  if (c.jobs < 1) throw ConfigError("train.jobs must be at least 1");
  return c;
}

json app_config_to_json(const AppConfig& c) {
  json arms = json::array();
  for (const auto& a : c.arms) arms.push_back(a.name());
  return {
      {"seed", c.train.seed},
      {"data", {{"train_manifest", c.data.train_manifest}, {"test_manifest", c.data.test_manifest}}},
      {"model", model_config_to_json(c.train.model)},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"runs", c.train.runs},
        {"normalize", c.train.normalize},
        {"arms", arms},
        {"jobs", c.jobs}}},
      {"mask",
       {{"kind", mask_kind_name(c.train.mask.kind)},
        {"lambda", c.train.mask.lambda},
        {"paper_literal_center_range", c.train.mask.paper_literal_center_range}}},
      {"optim", {{"lr", c.train.optim.lr}, {"betas", {c.train.optim.beta1, c.train.optim.beta2}}, {"eps", c.train.optim.eps}}},
      {"eval", {{"normalize", c.eval_normalize}}},
      {"sweep",
       {{"mask_kind", mask_kind_name(c.sweep.kind)},
        {"lambdas", c.sweep.lambdas},
        {"arm", c.sweep.arm.name()},
        {"runs", c.sweep.runs}}},
      {"synth", synth_config_to_json(c.synth)},
  };
}

AppConfig load_app_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open config " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + file.string() + ": " + e.what());
  }
  AppConfig c = app_config_from_json(j);
  const fs::path base = file.parent_path();
  for (std::string* p : {&c.data.train_manifest, &c.data.test_manifest})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

}  // namespace cardioseg
