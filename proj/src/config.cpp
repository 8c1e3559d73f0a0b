#include "rae/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "rae/data.hpp"
#include "rae/error.hpp"

namespace rae {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Shortest representation that still round-trips exactly.
std::string fmt_double(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

double parse_double(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(field + ": expected a number, got '" + s + "'");
  }
}

long parse_long(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(field + ": expected an integer, got '" + s + "'");
  }
}

std::uint64_t parse_u64(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(field + ": expected an unsigned integer, got '" + s + "'");
  }
}

bool parse_bool(const std::string& s, const std::string& field) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(field + ": expected true/false, got '" + s + "'");
}

#define RAE_FIELD_NUM(section, key, expr, parse)                                  \
  {#section, #key, [](const RunConfig& c) { return fmt_double(c.expr); },         \
   [](RunConfig& c, const std::string& s) {                                       \
     c.expr = static_cast<decltype(c.expr)>(parse(s, #section "." #key));         \
   }}

#define RAE_FIELD_STR(section, key, expr)                                          \
  {#section, #key, [](const RunConfig& c) { return c.expr; },                      \
   [](RunConfig& c, const std::string& s) { c.expr = s; }}

#define RAE_FIELD_BOOL(section, key, expr)                                          \
  {#section, #key, [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
   [](RunConfig& c, const std::string& s) { c.expr = parse_bool(s, #section "." #key); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> defs = {
      RAE_FIELD_NUM(model, dim, model.dim, parse_long),
      RAE_FIELD_NUM(model, heads, model.heads, parse_long),
      RAE_FIELD_NUM(model, enc_depth, model.enc_depth, parse_long),
      RAE_FIELD_NUM(model, reg_depth, model.reg_depth, parse_long),
      RAE_FIELD_NUM(model, dec_depth, model.dec_depth, parse_long),
      RAE_FIELD_NUM(model, patches, model.patch_count, parse_long),
      RAE_FIELD_NUM(model, neighbors, model.neighbors, parse_long),
      RAE_FIELD_NUM(model, mask_ratio, model.mask_ratio, parse_double),
      {"model", "kv_mode",
       [](const RunConfig& c) {
         return std::string(c.model.kv_mode == KvMode::previous_layer ? "previous_layer"
                                                                      : "visible_always");
       },
       [](RunConfig& c, const std::string& s) {
         if (s == "previous_layer")
           c.model.kv_mode = KvMode::previous_layer;
         else if (s == "visible_always")
           c.model.kv_mode = KvMode::visible_always;
         else
           throw ConfigError("model.kv_mode: unknown value '" + s + "'");
       }},
      {"model", "recon_target",
       [](const RunConfig& c) {
         return std::string(c.model.recon_target == ReconTarget::coordinates ? "coordinates"
                                                                             : "external_features");
       },
       [](RunConfig& c, const std::string& s) {
         if (s == "coordinates")
           c.model.recon_target = ReconTarget::coordinates;
         else if (s == "external_features")
           c.model.recon_target = ReconTarget::external_features;
         else
           throw ConfigError("model.recon_target: unknown value '" + s + "'");
       }},
      RAE_FIELD_NUM(model, feature_dim, model.feature_dim, parse_long),
      {"model", "variant",
       [](const RunConfig& c) {
         switch (c.model.variant) {
           case PipelineVariant::both: return std::string("both");
           case PipelineVariant::regressor_only: return std::string("regressor_only");
           case PipelineVariant::decoder_only: return std::string("decoder_only");
           case PipelineVariant::neither: return std::string("neither");
         }
         return std::string("both");
       },
       [](RunConfig& c, const std::string& s) {
         if (s == "both")
           c.model.variant = PipelineVariant::both;
         else if (s == "regressor_only")
           c.model.variant = PipelineVariant::regressor_only;
         else if (s == "decoder_only")
           c.model.variant = PipelineVariant::decoder_only;
         else if (s == "neither")
           c.model.variant = PipelineVariant::neither;
         else
           throw ConfigError("model.variant: unknown value '" + s + "'");
       }},
      RAE_FIELD_STR(optim, precision, precision),
      RAE_FIELD_NUM(optim, lr, lr, parse_double),
      RAE_FIELD_NUM(optim, head_lr, head_lr, parse_double),
      RAE_FIELD_NUM(optim, weight_decay, weight_decay, parse_double),
      RAE_FIELD_NUM(optim, epochs, epochs, parse_long),
      RAE_FIELD_NUM(optim, warmup_epochs, warmup_epochs, parse_long),
      RAE_FIELD_NUM(optim, finetune_epochs, finetune_epochs, parse_long),
      RAE_FIELD_NUM(optim, batch_size, batch_size, parse_long),
      RAE_FIELD_NUM(optim, ema_momentum, ema_momentum, parse_double),
      RAE_FIELD_NUM(optim, align_weight, align_weight, parse_double),
      RAE_FIELD_STR(optim, align_target, align_target),
      RAE_FIELD_NUM(optim, infonce_tau, infonce_tau, parse_double),
      RAE_FIELD_NUM(optim, ntxent_tau, ntxent_tau, parse_double),
      RAE_FIELD_NUM(optim, ckpt_every, ckpt_every, parse_long),
      RAE_FIELD_STR(data, source, data.source),
      RAE_FIELD_STR(data, dir, data.dir),
      RAE_FIELD_STR(data, classes, data.classes),
      RAE_FIELD_NUM(data, train_per_class, data.train_per_class, parse_long),
      RAE_FIELD_NUM(data, test_per_class, data.test_per_class, parse_long),
      RAE_FIELD_NUM(data, points, data.points, parse_long),
      RAE_FIELD_NUM(data, noise, data.noise, parse_double),
      {"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& s) { c.seed = parse_u64(s, "run.seed"); }},
      RAE_FIELD_STR(run, out_dir, out_dir),
      RAE_FIELD_STR(run, run_name, run_name),
      RAE_FIELD_STR(run, augment, augment),
      RAE_FIELD_BOOL(run, no_regressor, no_regressor),
      RAE_FIELD_STR(run, compare_log, compare_log),
      RAE_FIELD_STR(run, cloud, cloud),
      RAE_FIELD_STR(run, axes, axes),
      RAE_FIELD_STR(run, recon_features, recon_features),
      RAE_FIELD_STR(finetune, protocol, protocol),
      RAE_FIELD_STR(finetune, topology, topology),
      RAE_FIELD_STR(finetune, combine, combine),
      RAE_FIELD_NUM(finetune, virtual_queries, virtual_queries, parse_long),
      RAE_FIELD_NUM(finetune, head_hidden, head_hidden, parse_long),
      RAE_FIELD_STR(finetune, checkpoint, checkpoint),
      RAE_FIELD_BOOL(fewshot, few_shot, few_shot),
      RAE_FIELD_NUM(fewshot, n_way, n_way, parse_long),
      RAE_FIELD_NUM(fewshot, k_shot, k_shot, parse_long),
      RAE_FIELD_NUM(fewshot, n_query, n_query, parse_long),
      RAE_FIELD_NUM(fewshot, episodes, episodes, parse_long),
  };
  return defs;
}

#undef RAE_FIELD_NUM
#undef RAE_FIELD_STR
#undef RAE_FIELD_BOOL

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

AlignTarget RunConfig::align_target_enum() const {
  if (align_target == "cosine") return AlignTarget::cosine;
  if (align_target == "mse") return AlignTarget::mse;
  if (align_target == "infonce") return AlignTarget::infonce;
  if (align_target == "ntxent") return AlignTarget::ntxent;
  throw ConfigError("optim.align_target: unknown value '" + align_target + "'");
}

AugmentKind RunConfig::augment_enum() const {
  if (augment == "none") return AugmentKind::none;
  if (augment == "scale_translate") return AugmentKind::scale_translate;
  if (augment == "rotate") return AugmentKind::rotate;
  throw ConfigError("run.augment: unknown value '" + augment + "'");
}

Protocol RunConfig::protocol_enum() const {
  if (protocol == "FULL") return Protocol::FULL;
  if (protocol == "LINEAR") return Protocol::LINEAR;
  if (protocol == "MLP3") return Protocol::MLP3;
  throw ConfigError("finetune.protocol: unknown value '" + protocol + "'");
}

void RunConfig::validate(const std::string& cmd) const {
  model.validate();
  if (precision != "f64" && precision != "f32")
    throw ConfigError("optim.precision: must be f64 or f32, got '" + precision + "'");
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
  if (epochs < 0) throw ConfigError("optim.epochs must be non-negative");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0))
    throw ConfigError("optim.ema_momentum must be in [0,1]");
  if (align_weight < 0.0) throw ConfigError("optim.align_weight must be non-negative");
  (void)align_target_enum();
  (void)augment_enum();
  (void)protocol_enum();
  const std::size_t masked =
      static_cast<std::size_t>(std::floor(model.mask_ratio * static_cast<double>(model.patch_count)));
  if (masked < 1 || masked >= model.patch_count)
    throw ConfigError("model.mask_ratio leaves no masked or no visible patches at patches=" +
                      std::to_string(model.patch_count));
  if (data.source == "synthetic") {
    parse_shape_classes(data.classes);
    if (data.points < model.neighbors)
      throw ConfigError("data.points must be at least model.neighbors");
    if (data.points < model.patch_count)
      throw ConfigError("data.points must be at least model.patches");
  } else if (data.source == "dir") {
    if (data.dir.empty()) throw ConfigError("data.dir required when data.source=dir");
  } else {
    throw ConfigError("data.source: unknown value '" + data.source + "'");
  }
  {
    // Comma lists are allowed (topology grids).
    std::stringstream ss(topology);
    std::string tok;
    bool any = false;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      any = true;
      if (tok != "a" && tok != "b" && tok != "c" && tok != "d")
        throw ConfigError("finetune.topology: must be one of a,b,c,d, got '" + tok + "'");
      if (tok != "a" && resolved_virtual_queries() == 0)
        throw ConfigError("finetune.virtual_queries: topology '" + tok + "' needs at least one query");
    }
    if (!any) throw ConfigError("finetune.topology: empty");
  }
  if (combine != "concat" && combine != "add")
    throw ConfigError("finetune.combine: must be concat or add, got '" + combine + "'");

  if (cmd == "finetune" || cmd == "eval" || cmd == "reconstruct") {
    if (checkpoint.empty()) throw ConfigError("finetune.checkpoint: required for " + cmd);
  }
  if (cmd == "reconstruct" && cloud.empty()) throw ConfigError("run.cloud: required for reconstruct");
  if (cmd == "ablate" && axes.empty()) throw ConfigError("run.axes: required for ablate");
  if (cmd == "eval" && few_shot) {
    if (n_way < 2) throw ConfigError("fewshot.n_way must be at least 2");
    if (k_shot == 0 || n_query == 0) throw ConfigError("fewshot.k_shot and n_query must be positive");
    if (episodes == 0) throw ConfigError("fewshot.episodes must be positive");
  }
  if (model.recon_target == ReconTarget::external_features && recon_features.empty() &&
      (cmd == "pretrain" || cmd == "ablate"))
    throw ConfigError("run.recon_features: required for recon_target=external_features");
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << "\n";
      section = f.section;
      out << "[" << section << "]\n";
    }
    out << f.key << " = " << f.get(*this) << "\n";
  }
  return out.str();
}

RunConfig RunConfig::from_ini_string(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": bad section");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields())
      if (f.section == section && f.key == key) {
        f.set(rc, value);
        found = true;
        break;
      }
    if (!found)
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown field '" + section + "." +
                        key + "'");
  }
  return rc;
}

RunConfig RunConfig::from_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_ini_string(buf.str());
}

RunConfig RunConfig::profile(const std::string& name) {
  RunConfig rc;  // defaults are the desk-scale configuration
  if (name == "desk") return rc;
  if (name == "paper") {
    rc.model.dim = 384;
    rc.model.heads = 6;
    rc.model.enc_depth = 12;
    rc.model.reg_depth = 4;
    rc.model.dec_depth = 2;
    rc.model.patch_count = 64;
    rc.model.neighbors = 32;
    rc.data.points = 1024;
    rc.epochs = 300;
    rc.batch_size = 128;
    rc.augment = "scale_translate";
    return rc;
  }
  throw ConfigError("unknown profile '" + name + "'");
}

}  // namespace rae
