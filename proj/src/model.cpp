#include "cpvt/model.hpp"

#include <cstddef>
#include <sstream>
#include <string>

#include "cpvt/errors.hpp"
#include "cpvt/rng.hpp"

namespace cpvt {

// ---- enum <-> string ----

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "cls") return HeadKind::cls;
  if (s == "gap") return HeadKind::gap;
  throw ConfigError("unknown head kind '" + s + "'");
}

std::string to_string(HeadKind k) {
  return k == HeadKind::cls ? "cls" : "gap";
}

NormPlacement norm_placement_from_string(const std::string& s) {
  if (s == "pre") return NormPlacement::pre;
  if (s == "post") return NormPlacement::post;
  throw ConfigError("unknown norm placement '" + s + "'");
}

std::string to_string(NormPlacement n) {
  return n == NormPlacement::pre ? "pre" : "post";
}

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "'");
}

std::string to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

// ---- config ----

void ModelConfig::validate() const {
  auto positive = [](const char* field, int v) {
    if (v <= 0) {
      throw ConfigError(std::string(field) + " must be positive, got " +
                        std::to_string(v));
    }
  };
  positive("depth", depth);
  positive("dim", dim);
  positive("heads", heads);
  positive("patch", patch);
  positive("image_size", image_size);
  positive("in_channels", in_channels);
  positive("num_classes", num_classes);
  positive("ffn_ratio", ffn_ratio);
  if (dim % heads != 0) {
    throw ConfigError("dim " + std::to_string(dim) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if (image_size % patch != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " is not divisible by patch " + std::to_string(patch));
  }
  if (scheme.kind == SchemeKind::peg) {
    scheme.peg.validate(depth);
  }
  if (scheme.kind == SchemeKind::relative && scheme.relative_clip <= 0) {
    throw ConfigError("relative_clip must be positive, got " +
                      std::to_string(scheme.relative_clip));
  }
}

namespace {

int parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" +
                      value + "'");
  }
  if (used != value.size()) {
    throw ConfigError("config key '" + key + "' needs an integer, got '" +
                      value + "'");
  }
  return v;
}

bool parse_bool01(const std::string& key, const std::string& value) {
  if (value == "0" || value == "false") return false;
  if (value == "1" || value == "true") return true;
  throw ConfigError("config key '" + key + "' needs 0 or 1, got '" + value +
                    "'");
}

std::string positions_to_string(const std::vector<int>& positions) {
  std::string out;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(positions[i]);
  }
  return out;
}

std::vector<int> positions_from_string(const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_int("peg_positions", item));
  }
  if (out.empty()) {
    throw ConfigError("peg_positions must list at least one block index");
  }
  return out;
}

}  // namespace

bool set_model_config_field(ModelConfig& cfg, const std::string& key,
                            const std::string& value) {
  if (key == "depth") cfg.depth = parse_int(key, value);
  else if (key == "dim") cfg.dim = parse_int(key, value);
  else if (key == "heads") cfg.heads = parse_int(key, value);
  else if (key == "patch") cfg.patch = parse_int(key, value);
  else if (key == "image_size") cfg.image_size = parse_int(key, value);
  else if (key == "in_channels") cfg.in_channels = parse_int(key, value);
  else if (key == "num_classes") cfg.num_classes = parse_int(key, value);
  else if (key == "head") cfg.head = head_kind_from_string(value);
  else if (key == "ffn_ratio") cfg.ffn_ratio = parse_int(key, value);
  else if (key == "activation") cfg.activation = activation_from_string(value);
  else if (key == "norm") cfg.norm = norm_placement_from_string(value);
  else if (key == "precision") cfg.precision = precision_from_string(value);
  else if (key == "scheme") cfg.scheme.kind = scheme_kind_from_string(value);
  else if (key == "peg_kernel") cfg.scheme.peg.kernel = parse_int(key, value);
  else if (key == "peg_layers") cfg.scheme.peg.layers = parse_int(key, value);
  else if (key == "peg_function")
    cfg.scheme.peg.function = peg_function_from_string(value);
  else if (key == "peg_padding")
    cfg.scheme.peg.padding = padding_mode_from_string(value);
  else if (key == "peg_positions")
    cfg.scheme.peg.positions = positions_from_string(value);
  else if (key == "relative_clip")
    cfg.scheme.relative_clip = parse_int(key, value);
  else if (key == "relative_value_bias")
    cfg.scheme.relative_value_bias = parse_bool01(key, value);
  else return false;
  return true;
}

std::map<std::string, std::string> model_config_to_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["depth"] = std::to_string(cfg.depth);
  kv["dim"] = std::to_string(cfg.dim);
  kv["heads"] = std::to_string(cfg.heads);
  kv["patch"] = std::to_string(cfg.patch);
  kv["image_size"] = std::to_string(cfg.image_size);
  kv["in_channels"] = std::to_string(cfg.in_channels);
  kv["num_classes"] = std::to_string(cfg.num_classes);
  kv["head"] = to_string(cfg.head);
  kv["ffn_ratio"] = std::to_string(cfg.ffn_ratio);
  kv["activation"] = to_string(cfg.activation);
  kv["norm"] = to_string(cfg.norm);
  kv["precision"] = to_string(cfg.precision);
  kv["scheme"] = to_string(cfg.scheme.kind);
  kv["peg_kernel"] = std::to_string(cfg.scheme.peg.kernel);
  kv["peg_layers"] = std::to_string(cfg.scheme.peg.layers);
  kv["peg_function"] = to_string(cfg.scheme.peg.function);
  kv["peg_padding"] = to_string(cfg.scheme.peg.padding);
  kv["peg_positions"] = positions_to_string(cfg.scheme.peg.positions);
  kv["relative_clip"] = std::to_string(cfg.scheme.relative_clip);
  kv["relative_value_bias"] = cfg.scheme.relative_value_bias ? "1" : "0";
  return kv;
}

ModelConfig model_config_from_kv(
    const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  for (const auto& [key, value] : kv) {
    if (!set_model_config_field(cfg, key, value)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return cfg;
}

std::string config_text(const ModelConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : model_config_to_kv(cfg)) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  }
  return out;
}

// ---- construction ----

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Precision p = cfg.precision;
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  {
    Rng r = rng.stream("patch");
    m.patch_proj =
        make_linear(cfg.in_channels * cfg.patch * cfg.patch, cfg.dim, r, p);
  }
  if (cfg.has_cls()) {
    m.cls_token = Tensor::zeros({cfg.dim}, p);
  }
  {
    Rng r = rng.stream("scheme");
    m.scheme = make_scheme_state(cfg.scheme, cfg.dim, cfg.heads, cfg.grid_h(),
                                 cfg.grid_w(), cfg.has_cls(), cfg.depth, r, p);
  }
  for (int i = 0; i < cfg.depth; ++i) {
    Rng r = rng.stream("block").stream(static_cast<std::uint64_t>(i));
    EncoderBlock blk;
    blk.ln1 = make_layer_norm(cfg.dim, p);
    blk.attn = make_mhsa(cfg.dim, cfg.heads, r, p);
    blk.ln2 = make_layer_norm(cfg.dim, p);
    blk.ffn = make_ffn(cfg.dim, cfg.dim * cfg.ffn_ratio, cfg.activation, r, p);
    m.blocks.push_back(std::move(blk));
  }
  if (cfg.norm == NormPlacement::pre) {
    m.final_norm = make_layer_norm(cfg.dim, p);
  }
  {
    Rng r = rng.stream("head");
    m.classifier = make_linear(cfg.dim, cfg.num_classes, r, p);
  }
  return m;
}

std::vector<std::pair<std::string, Tensor>> named_params(const Model& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add = [&out](const std::string& name, const Tensor& t) {
    if (t.defined()) out.emplace_back(name, t);
  };
  add("patch_embed.weight", m.patch_proj.weight);
  add("patch_embed.bias", m.patch_proj.bias);
  add("cls_token", m.cls_token);
  add("scheme.pos_embed.grid", m.scheme.pos_grid);
  add("scheme.pos_embed.cls", m.scheme.pos_cls);
  add("scheme.rel_bias.key", m.scheme.rel.key_table);
  if (m.scheme.rel.use_value_bias) {
    add("scheme.rel_bias.value", m.scheme.rel.value_table);
  }
  for (std::size_t i = 0; i < m.scheme.pegs.size(); ++i) {
    const PEGParams& peg = m.scheme.pegs[i];
    const std::string base = "scheme.peg." + std::to_string(i) + ".conv.";
    for (std::size_t l = 0; l < peg.dw.size(); ++l) {
      add(base + std::to_string(l) + ".kernel", peg.dw[l].kernel);
    }
    for (std::size_t l = 0; l < peg.sep.size(); ++l) {
      add(base + std::to_string(l) + ".kernel", peg.sep[l].dw.kernel);
      add(base + std::to_string(l) + ".pointwise", peg.sep[l].pointwise);
    }
  }
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const EncoderBlock& b = m.blocks[i];
    const std::string base = "blocks." + std::to_string(i) + ".";
    add(base + "ln1.gamma", b.ln1.gamma);
    add(base + "ln1.beta", b.ln1.beta);
    add(base + "attn.q.weight", b.attn.q.weight);
    add(base + "attn.q.bias", b.attn.q.bias);
    add(base + "attn.k.weight", b.attn.k.weight);
    add(base + "attn.k.bias", b.attn.k.bias);
    add(base + "attn.v.weight", b.attn.v.weight);
    add(base + "attn.v.bias", b.attn.v.bias);
    add(base + "attn.o.weight", b.attn.o.weight);
    add(base + "attn.o.bias", b.attn.o.bias);
    add(base + "ln2.gamma", b.ln2.gamma);
    add(base + "ln2.beta", b.ln2.beta);
    add(base + "ffn.fc1.weight", b.ffn.fc1.weight);
    add(base + "ffn.fc1.bias", b.ffn.fc1.bias);
    add(base + "ffn.fc2.weight", b.ffn.fc2.weight);
    add(base + "ffn.fc2.bias", b.ffn.fc2.bias);
  }
  add("final_norm.gamma", m.final_norm.gamma);
  add("final_norm.beta", m.final_norm.beta);
  add("classifier.weight", m.classifier.weight);
  add("classifier.bias", m.classifier.bias);
  return out;
}

void set_trainable(Model& m, bool trainable) {
  for (auto& [name, t] : named_params(m)) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
  }
}

// ---- forward ----

namespace {

void capture_scores(const Tensor& scores, int layer,
                    std::vector<AttentionRecord>* records) {
  NoGradGuard guard;
  const std::int64_t B = scores.dim(0);
  const std::int64_t H = scores.dim(1);
  const std::int64_t N = scores.dim(2);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < H; ++h) {
      const double* src = scores.data().data() + ((b * H + h) * N) * N;
      std::vector<double> mat(src, src + N * N);
      AttentionRecord rec;
      rec.layer = layer;
      rec.head = static_cast<int>(h);
      rec.batch_index = static_cast<int>(b);
      rec.scores = Tensor::from_data({N, N}, std::move(mat), scores.precision());
      records->push_back(std::move(rec));
    }
  }
}

}  // namespace

TokenGrid forward_features(const Model& m, const Tensor& images,
                           const ForwardOptions& opt) {
  const ModelConfig& cfg = m.cfg;
  if (images.rank() != 4) {
    throw ShapeError("expected images [B,C,H,W], got " +
                     shape_str(images.shape()));
  }
  if (images.dim(1) != cfg.in_channels) {
    throw InputError("model expects " + std::to_string(cfg.in_channels) +
                     " input channels, got " + std::to_string(images.dim(1)));
  }
  // images are cast to the model's storage precision at the boundary so a
  // 32-bit model computes in 32-bit throughout
  Tensor imgs = images;
  if (cfg.precision == Precision::f32 &&
      images.precision() != Precision::f32) {
    imgs = Tensor::from_data(images.shape(), images.data(), Precision::f32);
  }
  TokenGrid g = patch_embed(imgs, cfg.patch, m.patch_proj);

  if (cfg.has_cls()) {
    const std::int64_t B = g.tokens.dim(0);
    Tensor cls_row = reshape(m.cls_token, {1, cfg.dim});
    Tensor cls_batch =
        add_bcast(Tensor::zeros({B, 1, cfg.dim}, cfg.precision), cls_row);
    g.tokens = concat_axis(cls_batch, g.tokens, 1);
    g.has_cls = true;
  }

  // A learnable table built for another grid is resized into a local copy of
  // the positional state; the model's own parameters are never touched.
  const SchemeState* st = &m.scheme;
  SchemeState resized;
  if (cfg.scheme.kind == SchemeKind::learnable && opt.allow_pe_resize &&
      static_cast<std::int64_t>(g.grid_h) * g.grid_w !=
          m.scheme.pos_grid.dim(0)) {
    resized = m.scheme;
    Tensor grid3 = reshape(m.scheme.pos_grid,
                           {m.scheme.built_h, m.scheme.built_w, cfg.dim});
    Tensor r = resize_learnable_pe(grid3, g.grid_h, g.grid_w);
    resized.pos_grid =
        reshape(r, {static_cast<std::int64_t>(g.grid_h) * g.grid_w, cfg.dim});
    resized.built_h = g.grid_h;
    resized.built_w = g.grid_w;
    st = &resized;
  }

  g = apply_scheme(g, *st, -1);

  const bool pre = cfg.norm == NormPlacement::pre;
  for (int i = 0; i < cfg.depth; ++i) {
    const EncoderBlock& blk = m.blocks[static_cast<std::size_t>(i)];
    const bool want_scores =
        opt.records != nullptr &&
        (opt.attention_layer < 0 || opt.attention_layer == i);

    Tensor x = g.tokens;
    Tensor attn_in = pre ? layer_norm(x, blk.ln1) : x;
    Tensor scores;
    Tensor* sp = want_scores ? &scores : nullptr;
    Tensor a;
    if (cfg.scheme.kind == SchemeKind::relative) {
      TokenGrid attn_grid = g;
      attn_grid.tokens = attn_in;
      a = relative_mhsa(attn_grid, blk.attn, st->rel, sp);
    } else {
      a = mhsa(attn_in, blk.attn, sp);
    }
    if (want_scores) capture_scores(scores, i, opt.records);
    x = add(x, a);
    if (!pre) x = layer_norm(x, blk.ln1);

    Tensor ffn_in = pre ? layer_norm(x, blk.ln2) : x;
    x = add(x, ffn(ffn_in, blk.ffn));
    if (!pre) x = layer_norm(x, blk.ln2);

    g.tokens = x;
    g = apply_scheme(g, *st, i);
  }

  if (pre) {
    g.tokens = layer_norm(g.tokens, m.final_norm);
  }
  return g;
}

Tensor forward(const Model& m, const Tensor& images,
               const ForwardOptions& opt) {
  TokenGrid f = forward_features(m, images, opt);
  const std::int64_t B = f.tokens.dim(0);
  Tensor pooled;
  if (m.cfg.has_cls()) {
    pooled = reshape(slice_axis(f.tokens, 1, 0, 1), {B, m.cfg.dim});
  } else {
    pooled = mean_tokens(f.tokens);
  }
  return linear(pooled, m.classifier);
}

Tensor forward_variable_resolution(const Model& m, const Tensor& images) {
  ForwardOptions opt;
  opt.allow_pe_resize = true;
  return forward(m, images, opt);
}

std::vector<AttentionRecord> attention_scores(const Model& m,
                                              const Tensor& images,
                                              int layer) {
  if (layer < 0 || layer >= m.cfg.depth) {
    throw InputError("attention layer " + std::to_string(layer) +
                     " out of range for depth " + std::to_string(m.cfg.depth));
  }
  std::vector<AttentionRecord> records;
  ForwardOptions opt;
  opt.attention_layer = layer;
  opt.records = &records;
  NoGradGuard guard;
  forward_features(m, images, opt);
  return records;
}

// ---- cost accounting ----

CountReport count_params_flops(const Model& m) {
  const ModelConfig& cfg = m.cfg;
  CountReport rep;

  auto group_of = [](const std::string& name) -> std::string {
    if (name.rfind("blocks.", 0) == 0) return "blocks";
    if (name.rfind("scheme.", 0) == 0) return "scheme";
    if (name.rfind("patch_embed.", 0) == 0) return "patch_embed";
    if (name.rfind("final_norm.", 0) == 0) return "final_norm";
    if (name.rfind("classifier.", 0) == 0) return "classifier";
    return name;
  };
  std::map<std::string, std::int64_t> groups;
  for (const auto& [name, t] : named_params(m)) {
    const std::int64_t n = t.numel();
    rep.total_params += n;
    groups[group_of(name)] += n;
    if (name.rfind("scheme.", 0) == 0) rep.pos_params += n;
    if (name.rfind("scheme.peg.", 0) == 0) rep.peg_params += n;
  }
  for (const auto& [g, n] : groups) rep.param_groups.emplace_back(g, n);

  const std::int64_t d = cfg.dim;
  const std::int64_t N =
      static_cast<std::int64_t>(cfg.grid_h()) * cfg.grid_w();
  const std::int64_t Np = N + (cfg.has_cls() ? 1 : 0);
  const std::int64_t dk = d / cfg.heads;

  const std::int64_t patch_flops =
      N * (static_cast<std::int64_t>(cfg.in_channels) * cfg.patch * cfg.patch) *
      d;
  std::int64_t attn_flops_per_block = 4 * Np * d * d + 2 * Np * Np * d;
  if (cfg.scheme.kind == SchemeKind::relative) {
    attn_flops_per_block += Np * Np * dk * cfg.heads;  // key bias dot products
    if (cfg.scheme.relative_value_bias) {
      attn_flops_per_block += Np * Np * dk * cfg.heads;
    }
  }
  const std::int64_t ffn_flops_per_block =
      2 * Np * d * (static_cast<std::int64_t>(cfg.ffn_ratio) * d);

  std::int64_t peg_flops = 0;
  if (cfg.scheme.kind == SchemeKind::peg) {
    const std::int64_t k = cfg.scheme.peg.kernel;
    const std::int64_t l = cfg.scheme.peg.layers;
    std::int64_t per_position = N * d * l * k * k;
    if (cfg.scheme.peg.function == PEGFunction::separable) {
      per_position += N * d * d * l;
    }
    peg_flops =
        per_position * static_cast<std::int64_t>(cfg.scheme.peg.positions.size());
  }
  const std::int64_t classifier_flops = d * cfg.num_classes;

  rep.peg_flops = peg_flops;
  rep.flops = patch_flops + cfg.depth * (attn_flops_per_block + ffn_flops_per_block) +
              peg_flops + classifier_flops;
  rep.flop_groups.emplace_back("patch_embed", patch_flops);
  rep.flop_groups.emplace_back("attention", cfg.depth * attn_flops_per_block);
  rep.flop_groups.emplace_back("ffn", cfg.depth * ffn_flops_per_block);
  rep.flop_groups.emplace_back("peg", peg_flops);
  rep.flop_groups.emplace_back("classifier", classifier_flops);
  return rep;
}

}  // namespace cpvt
