#include "fairm2s/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace fairm2s {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double to_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

long long to_ll(const std::string& s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not an integer");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not a nonnegative integer");
  return v;
}

int to_int(const std::string& s) {
  const auto v = to_ll(s);
  if (v < INT32_MIN || v > INT32_MAX) throw std::out_of_range("integer out of range");
  return static_cast<int>(v);
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("not a boolean");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename Conv>
std::vector<T> parse_list(const std::string& s, Conv conv) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) out.push_back(conv(item));
  return out;
}

template <typename T, typename Fmt>
std::string join(const std::vector<T>& v, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt(v[i]);
  }
  return out;
}

struct Field {
  std::string key;  // section.name
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FM_DOUBLE(KEY, MEMBER) \
  Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(v); }, [](const RunConfig& c) { return fmt_double(c.MEMBER); } }
#define FM_INT(KEY, MEMBER) \
  Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_int(v); }, [](const RunConfig& c) { return std::to_string(c.MEMBER); } }
#define FM_U64(KEY, MEMBER) \
  Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_u64(v); }, [](const RunConfig& c) { return std::to_string(c.MEMBER); } }
#define FM_BOOL(KEY, MEMBER) \
  Field { KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(v); }, [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); } }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      FM_INT("backbone.input_dim", backbone.input_dim),
      FM_INT("backbone.seq_len", backbone.seq_len),
      FM_INT("backbone.lstm_hidden", backbone.lstm_hidden),
      FM_INT("backbone.gru_hidden", backbone.gru_hidden),
      FM_DOUBLE("backbone.dropout_rate", backbone.dropout_rate),

      FM_DOUBLE("meta.eta_inner", meta.eta_inner),
      FM_DOUBLE("meta.beta_meta", meta.beta_meta),
      FM_INT("meta.inner_steps", meta.inner_steps),
      FM_INT("meta.tasks_per_batch", meta.tasks_per_batch),
      FM_INT("meta.epochs", meta.epochs),
      FM_INT("meta.shots", meta.shots),
      FM_INT("meta.query_size", meta.query_size),
      FM_DOUBLE("meta.epsilon_proj", meta.epsilon_proj),
      FM_BOOL("meta.use_agm", meta.use_agm),
      FM_BOOL("meta.use_fcgp", meta.use_fcgp),
      FM_BOOL("meta.use_eodd", meta.use_eodd),
      FM_BOOL("meta.use_margin", meta.use_margin),
      FM_BOOL("meta.use_smooth", meta.use_smooth),
      FM_U64("meta.seed", meta.seed),
      FM_BOOL("meta.first_order", meta.first_order),
      Field{"meta.optimizer",
            [](RunConfig& c, const std::string& v) {
              if (v == "adam") c.meta.optimizer = OuterOptimizer::adam;
              else if (v == "sgd") c.meta.optimizer = OuterOptimizer::sgd;
              else throw std::invalid_argument("expected adam or sgd");
            },
            [](const RunConfig& c) { return std::string(c.meta.optimizer == OuterOptimizer::adam ? "adam" : "sgd"); }},
      FM_DOUBLE("meta.adam_beta1", meta.adam_beta1),
      FM_DOUBLE("meta.adam_beta2", meta.adam_beta2),
      FM_DOUBLE("meta.adam_eps", meta.adam_eps),
      FM_INT("meta.adv_hidden", meta.adv_hidden),
      FM_DOUBLE("meta.adv_rate", meta.adv_rate),
      FM_DOUBLE("meta.lambda_keep", meta.lambda_keep),
      FM_DOUBLE("meta.adv_output_bias", meta.adv_output_bias),
      FM_INT("meta.threads", meta.threads),
      FM_INT("meta.eval_every", eval_every),

      FM_DOUBLE("weights.gamma", meta.weights.gamma),
      FM_DOUBLE("weights.alpha", meta.weights.alpha),
      FM_DOUBLE("weights.lambda_smooth", meta.weights.lambda_smooth),
      FM_DOUBLE("weights.margin_m", meta.weights.margin_m),
      FM_DOUBLE("weights.smooth_amount", meta.weights.smooth_amount),

      FM_DOUBLE("data.test_fraction", data.test_fraction),
      FM_U64("data.split_seed", data.split_seed),
      FM_BOOL("data.standardize", data.standardize),
      FM_INT("data.synthetic_n", data.synthetic_n),
      FM_DOUBLE("data.delta", data.bias.delta),
      FM_DOUBLE("data.group_ratio", data.bias.group_ratio),
      FM_DOUBLE("data.label_skew0", data.bias.label_skew[0]),
      FM_DOUBLE("data.label_skew1", data.bias.label_skew[1]),
      FM_DOUBLE("data.noise_sigma", data.bias.noise_sigma),
      FM_DOUBLE("data.signal", data.bias.signal),
      FM_U64("data.synthetic_seed", data.bias.seed),

      Field{"experiment.shots",
            [](RunConfig& c, const std::string& v) { c.experiment.shot_list = parse_list<int>(v, to_int); },
            [](const RunConfig& c) { return join(c.experiment.shot_list, [](int x) { return std::to_string(x); }); }},
      Field{"experiment.seeds",
            [](RunConfig& c, const std::string& v) { c.experiment.seed_list = parse_list<std::uint64_t>(v, to_u64); },
            [](const RunConfig& c) {
              return join(c.experiment.seed_list, [](std::uint64_t x) { return std::to_string(x); });
            }},
      Field{"experiment.gamma",
            [](RunConfig& c, const std::string& v) { c.experiment.gamma_grid = parse_list<double>(v, to_double); },
            [](const RunConfig& c) { return join(c.experiment.gamma_grid, fmt_double); }},
      Field{"experiment.lambda_smooth",
            [](RunConfig& c, const std::string& v) { c.experiment.lambda_grid = parse_list<double>(v, to_double); },
            [](const RunConfig& c) { return join(c.experiment.lambda_grid, fmt_double); }},
      Field{"experiment.alpha",
            [](RunConfig& c, const std::string& v) { c.experiment.alpha_grid = parse_list<double>(v, to_double); },
            [](const RunConfig& c) { return join(c.experiment.alpha_grid, fmt_double); }},
      Field{"experiment.ablations",
            [](RunConfig& c, const std::string& v) { c.experiment.ablations = split_list(v); },
            [](const RunConfig& c) { return join(c.experiment.ablations, [](const std::string& s) { return s; }); }},
      Field{"experiment.n_eval_tasks", [](RunConfig& c, const std::string& v) { c.experiment.n_eval_tasks = to_int(v); },
            [](const RunConfig& c) { return std::to_string(c.experiment.n_eval_tasks); }},
      Field{"experiment.eval_seed", [](RunConfig& c, const std::string& v) { c.experiment.eval_seed = to_u64(v); },
            [](const RunConfig& c) { return std::to_string(c.experiment.eval_seed); }},
  };
  return table;
}

#undef FM_DOUBLE
#undef FM_INT
#undef FM_U64
#undef FM_BOOL

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

void collect_validation(const RunConfig& c, std::vector<std::string>& errors) {
  auto check = [&](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.emplace_back(e.what());
    }
  };
  check([&] { c.backbone.validate(); });
  check([&] { c.meta.validate(); });
  check([&] { c.data.bias.validate(); });
  check([&] { c.experiment.validate(); });
  check([&] {
    if (!(c.data.test_fraction > 0 && c.data.test_fraction < 1)) throw ConfigError("data: test_fraction must be in (0, 1)");
    if (c.data.synthetic_n < 4) throw ConfigError("data: synthetic_n must be >= 4");
    if (c.eval_every < 0) throw ConfigError("meta: eval_every must be >= 0");
  });
}

}  // namespace

void ExperimentSpec::validate() const {
  if (shot_list.empty()) throw ConfigError("experiment: shots must be nonempty");
  for (int s : shot_list)
    if (s != 1 && s != 3 && s != 5) throw ConfigError("experiment: shots must be drawn from {1, 3, 5}");
  if (seed_list.empty()) throw ConfigError("experiment: seeds must be nonempty");
  if (gamma_grid.empty() || lambda_grid.empty() || alpha_grid.empty())
    throw ConfigError("experiment: grids must be nonempty");
  for (const auto* g : {&gamma_grid, &lambda_grid, &alpha_grid})
    for (double v : *g)
      if (!(v > 0)) throw ConfigError("experiment: grid values must be positive");
  for (const auto& a : ablations) {
    bool known = false;
    for (const auto& k : ablation_arms()) known = known || k == a;
    if (!known) throw ConfigError("experiment: unknown ablation arm '" + a + "'");
  }
  if (n_eval_tasks < 1) throw ConfigError("experiment: n_eval_tasks must be >= 1");
}

void RunConfig::validate() const {
  std::vector<std::string> errors;
  collect_validation(*this, errors);
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += e + "\n";
    throw ConfigError(msg);
  }
}

ConfigParseResult parse_config(const std::string& text, const RunConfig& base) {
  ConfigParseResult r{base, {}};
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') {
        r.errors.push_back(where + "malformed section header");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "backbone" && section != "meta" && section != "weights" && section != "data" &&
          section != "experiment") {
        r.errors.push_back(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      r.errors.push_back(where + "expected key = value");
      continue;
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto full = key.find('.') != std::string::npos || section.empty() ? key : section + "." + key;
    const auto* f = find_field(full);
    if (!f) {
      r.errors.push_back(where + "unknown key '" + full + "'");
      continue;
    }
    try {
      f->set(r.config, value);
    } catch (const std::exception& e) {
      r.errors.push_back(where + "bad value for '" + full + "': '" + value + "' (" + e.what() + ")");
    }
  }
  collect_validation(r.config, r.errors);
  return r;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto r = parse_config(ss.str());
  if (!r.errors.empty()) {
    std::string msg = path.string() + ": " + std::to_string(r.errors.size()) + " error(s)\n";
    for (const auto& e : r.errors) msg += "  " + e + "\n";
    throw ConfigError(msg);
  }
  return r.config;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  auto r = parse_config(assignment, cfg);
  if (!r.errors.empty()) {
    std::string msg;
    for (const auto& e : r.errors) msg += e + "\n";
    throw ConfigError(msg);
  }
  cfg = r.config;
}

std::map<std::string, std::string> config_fields(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[f.key] = f.get(cfg);
  return out;
}

std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  std::string current;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const auto sec = f.key.substr(0, dot);
    if (sec != current) {
      if (!current.empty()) os << '\n';
      os << '[' << sec << "]\n";
      current = sec;
    }
    os << f.key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

}  // namespace fairm2s
