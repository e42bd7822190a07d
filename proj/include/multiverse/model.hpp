#pragma once

// History encoder, coarse belief decoder and fine offset decoder wired from
// the nn building blocks. Every function here is pure given a parameter
// store; the graph argument only records what is needed for gradients.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiverse/autodiff.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/nn.hpp"
#include "multiverse/scenegen.hpp"

namespace mvt {

struct ModelConfig {
  std::size_t d_enc = 256;
  std::size_t d_dec = 256;
  std::size_t d_embed = 32;
  std::size_t kernel = 3;
  std::size_t num_classes = kNumSemanticClasses;
  bool use_gat = true;
  bool use_fine_decoder = true;
  bool use_multi_scale = true;
  nn::GatForm gat_form = nn::GatForm::additive;
  std::size_t history_len = 8;
  std::size_t max_pred_len = 26;

  std::size_t num_scales() const { return use_multi_scale ? 2 : 1; }
};

inline void validate(const ModelConfig& c) {
  if (c.d_enc == 0 || c.d_embed == 0 || c.num_classes == 0) throw ConfigError("model widths must be positive");
  if (c.d_enc != c.d_dec)
    throw ConfigError("decoders are initialized from the encoder state, so d_dec must equal d_enc");
  if (c.kernel % 2 == 0) throw ConfigError("model.kernel must be odd");
  if (c.history_len < 1) throw ConfigError("model.history_len must be >= 1");
  if (c.max_pred_len < 1) throw ConfigError("model.max_pred_len must be >= 1");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_enc", c.d_enc},
          {"d_dec", c.d_dec},
          {"d_embed", c.d_embed},
          {"kernel", c.kernel},
          {"num_classes", c.num_classes},
          {"use_gat", c.use_gat},
          {"use_fine_decoder", c.use_fine_decoder},
          {"use_multi_scale", c.use_multi_scale},
          {"gat_form", c.gat_form == nn::GatForm::additive ? "additive" : "attention"},
          {"history_len", c.history_len},
          {"max_pred_len", c.max_pred_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_enc = j.at("d_enc").get<std::size_t>();
  c.d_dec = j.at("d_dec").get<std::size_t>();
  c.d_embed = j.at("d_embed").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.use_gat = j.at("use_gat").get<bool>();
  c.use_fine_decoder = j.at("use_fine_decoder").get<bool>();
  c.use_multi_scale = j.at("use_multi_scale").get<bool>();
  const auto form = j.at("gat_form").get<std::string>();
  if (form != "additive" && form != "attention") throw ConfigError("unknown gat_form " + form);
  c.gat_form = form == "additive" ? nn::GatForm::additive : nn::GatForm::attention;
  c.history_len = j.at("history_len").get<std::size_t>();
  c.max_pred_len = j.at("max_pred_len").get<std::size_t>();
  return c;
}

inline std::string scale_prefix(std::size_t scale) { return "s" + std::to_string(scale); }

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  using Kind = nn::LayerSpec::Kind;
  ParameterStore<T> store(seed);
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_enc, K = cfg.num_classes, k = cfg.kernel;

  nn::declare(store, "enc.sem", {Kind::conv2d, K, d, k}, rng);
  nn::declare(store, "enc.lstm", {Kind::convrnn_cell, d, d, k}, rng);
  for (std::size_t s = 0; s < cfg.num_scales(); ++s) {
    const std::string p = scale_prefix(s);
    if (cfg.use_gat) nn::declare(store, p + ".coarse.gat", {Kind::gat, d, d, 1, K, cfg.gat_form}, rng);
    nn::declare(store, p + ".coarse.embed", {Kind::embed, 1, cfg.d_embed}, rng);
    nn::declare(store, p + ".coarse.lstm", {Kind::convrnn_cell, cfg.d_embed, d, k}, rng);
    nn::declare(store, p + ".coarse.out", {Kind::conv2d, d, 1, k}, rng);
    if (cfg.use_fine_decoder) {
      if (cfg.use_gat) nn::declare(store, p + ".fine.gat", {Kind::gat, d, d, 1, K, cfg.gat_form}, rng);
      nn::declare(store, p + ".fine.lstm", {Kind::convrnn_cell, 2, d, k}, rng);
      nn::declare(store, p + ".fine.head1", {Kind::dense, d, d}, rng);
      nn::declare(store, p + ".fine.head2", {Kind::dense, d, 2}, rng);
    }
  }
  return store;
}

// Throws ShapeError naming the first parameter whose presence or shape
// disagrees with what `cfg` would create.
template <typename T>
void check_compatible(const ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto ref = init_parameters<T>(cfg, 0);
  for (const auto& [name, e] : ref.entries()) {
    if (!store.contains(name)) throw ShapeError("parameter " + name + " missing for this model config");
    if (store.shape(name) != e.value.shape())
      throw ShapeError("parameter " + name + ": expected " + shape_str(e.value.shape()) + ", got " +
                       shape_str(store.shape(name)));
  }
  for (const auto& [name, e] : store.entries())
    if (!ref.contains(name)) throw ShapeError("parameter " + name + " is not used by this model config");
}

// ---------------------------------------------------------------------------
// Per-scenario inputs

template <typename T>
struct SceneInputs {
  GridSpec fine;
  GridSpec coarse;
  std::vector<Tensor<T>> location_maps;  // per history frame, (H, W, 1) one-hot
  std::vector<Tensor<T>> semantic;       // distinct one-hot maps (1 or h)
  Tensor<T> s_bar;                       // temporal average over the h frames
  CellIndex last_cell;
};

template <typename T>
Tensor<T> one_hot_cell(const GridSpec& g, CellIndex i) {
  check_cell(g, i);
  Tensor<T> t(Shape{g.rows, g.cols, 1});
  t[i.value] = T{1};
  return t;
}

template <typename T>
SceneInputs<T> prepare_inputs(const Scenario& s, Bounds mode = Bounds::clamp, ClampCounter* clamps = nullptr) {
  validate(s);
  SceneInputs<T> in;
  in.fine = s.fine;
  in.coarse = s.coarse;
  for (const Point2& p : s.history) {
    const CellIndex c = quantize_point(s.fine, p, mode, clamps);
    in.location_maps.push_back(one_hot_cell<T>(s.fine, c));
    in.last_cell = c;
  }
  for (const auto& m : s.semantic_maps) in.semantic.push_back(one_hot_semantic<T>(m));
  std::vector<Tensor<T>> frames;
  for (std::size_t t = 0; t < s.history.size(); ++t)
    frames.push_back(in.semantic.size() == 1 ? in.semantic.front() : in.semantic[t]);
  in.s_bar = temporal_average(frames);
  return in;
}

// ---------------------------------------------------------------------------
// Encoder

struct EncoderState {
  Var hidden;
  Var cell;
  Var s_bar;
};

template <typename T>
EncoderState encode_history(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& cfg,
                            const SceneInputs<T>& in) {
  if (in.location_maps.empty()) throw ArgumentError("encode_history: empty history");
  if (in.s_bar.dim(2) != cfg.num_classes)
    throw ShapeError("encode_history: scene has " + std::to_string(in.s_bar.dim(2)) + " classes, model expects " +
                     std::to_string(cfg.num_classes));
  const std::size_t H = in.fine.rows, W = in.fine.cols, d = cfg.d_enc;
  Var sem_w = g.param(params, "enc.sem.w");
  Var sem_b = g.param(params, "enc.sem.b");
  const auto lstm = nn::lstm_params(g, params, "enc.lstm");

  std::vector<Var> sem_feat;
  for (const auto& s : in.semantic) sem_feat.push_back(nn::conv2d(g, g.constant(s), sem_w, sem_b));

  nn::LstmState st{g.constant(Tensor<T>(Shape{H, W, d})), g.constant(Tensor<T>(Shape{H, W, d}))};
  for (std::size_t t = 0; t < in.location_maps.size(); ++t) {
    Var feat = sem_feat.size() == 1 ? sem_feat.front() : sem_feat[t];
    Var x = nn::mul_cells(g, g.constant(in.location_maps[t]), feat);
    st = nn::convrnn_step(g, x, st, lstm);
  }
  return {st.h, st.c, g.constant(in.s_bar)};
}

// ---------------------------------------------------------------------------
// Decoders

// Everything a decoder at one grid scale needs besides its recurrent state.
struct ScaleContext {
  std::size_t scale = 0;
  std::string prefix;
  GridSpec grid;
  NeighborTable neighbors;
  Var s_bar;
  nn::LstmState init;
  CellIndex last_cell;
};

// Scale 0 runs on the fine grid; scale 1 sees the encoder state and scene
// context average-pooled 2x2 onto the coarse grid.
template <typename T>
ScaleContext make_scale_context(Graph<T>& g, const EncoderState& enc, const SceneInputs<T>& in, std::size_t scale) {
  ScaleContext ctx;
  ctx.scale = scale;
  ctx.prefix = scale_prefix(scale);
  if (scale == 0) {
    ctx.grid = in.fine;
    ctx.s_bar = enc.s_bar;
    ctx.init = {enc.hidden, enc.cell};
    ctx.last_cell = in.last_cell;
  } else {
    ctx.grid = in.coarse;
    if (ctx.grid.rows * 2 != in.fine.rows || ctx.grid.cols * 2 != in.fine.cols)
      throw ConfigError("coarse grid must halve the fine grid for multi-scale decoding");
    ctx.s_bar = nn::avg_pool2(g, enc.s_bar);
    ctx.init = {nn::avg_pool2(g, enc.hidden), nn::avg_pool2(g, enc.cell)};
    ctx.last_cell = rescale_cell(in.fine, in.coarse, in.last_cell);
  }
  ctx.neighbors = NeighborTable::of(ctx.grid);
  return ctx;
}

template <typename T>
Var maybe_gat(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& cfg, const ScaleContext& ctx,
              const std::string& which, Var hidden) {
  if (!cfg.use_gat) return hidden;
  const auto p = nn::gat_params(g, params, ctx.prefix + "." + which + ".gat", cfg.gat_form);
  return nn::gat_layer(g, hidden, ctx.s_bar, p, ctx.neighbors, cfg.gat_form);
}

struct CoarseOut {
  nn::LstmState state;
  Var belief;
};

template <typename T>
CoarseOut coarse_step(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& cfg, const ScaleContext& ctx,
                      nn::LstmState prev, Var prev_belief) {
  const std::string p = ctx.prefix + ".coarse";
  Var hh = maybe_gat(g, params, cfg, ctx, "coarse", prev.h);
  Var e = nn::embed_belief(g, prev_belief, g.param(params, p + ".embed.w"), g.param(params, p + ".embed.b"));
  const auto st = nn::convrnn_step(g, e, {hh, prev.c}, nn::lstm_params(g, params, p + ".lstm"));
  Var logits = nn::conv2d(g, st.h, g.param(params, p + ".out.w"), g.param(params, p + ".out.b"));
  return {st, nn::spatial_softmax(g, logits)};
}

struct FineOut {
  nn::LstmState state;
  Var offsets;
};

template <typename T>
FineOut fine_step(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& cfg, const ScaleContext& ctx,
                  nn::LstmState prev, Var prev_offsets) {
  const std::string p = ctx.prefix + ".fine";
  Var hh = maybe_gat(g, params, cfg, ctx, "fine", prev.h);
  const auto st = nn::convrnn_step(g, prev_offsets, {hh, prev.c}, nn::lstm_params(g, params, p + ".lstm"));
  Var hid = nn::tanh(g, nn::dense(g, st.h, g.param(params, p + ".head1.w"), g.param(params, p + ".head1.b")));
  Var off = nn::dense(g, hid, g.param(params, p + ".head2.w"), g.param(params, p + ".head2.b"));
  return {st, off};
}

struct ScaleRollout {
  GridSpec grid;
  std::vector<Var> beliefs;
  std::vector<Var> offsets;  // empty when the fine decoder is disabled
};

struct Rollout {
  EncoderState encoder;
  std::vector<ScaleRollout> scales;
};

// Soft-feedback rollout: each coarse step consumes the previous predicted
// belief; the first step consumes the one-hot of the last observed cell.
template <typename T>
Rollout rollout(Graph<T>& g, const ParameterStore<T>& params, const ModelConfig& cfg, const SceneInputs<T>& in,
                std::size_t steps) {
  if (steps < 1) throw ArgumentError("rollout: steps must be >= 1");
  Rollout out;
  out.encoder = encode_history(g, params, cfg, in);
  for (std::size_t s = 0; s < cfg.num_scales(); ++s) {
    const ScaleContext ctx = make_scale_context(g, out.encoder, in, s);
    ScaleRollout sr;
    sr.grid = ctx.grid;
    nn::LstmState st = ctx.init;
    Var belief = g.constant(one_hot_cell<T>(ctx.grid, ctx.last_cell));
    for (std::size_t t = 0; t < steps; ++t) {
      const auto o = coarse_step(g, params, cfg, ctx, st, belief);
      st = o.state;
      belief = o.belief;
      sr.beliefs.push_back(belief);
    }
    if (cfg.use_fine_decoder) {
      nn::LstmState fs = ctx.init;
      Var off = g.constant(Tensor<T>(Shape{ctx.grid.rows, ctx.grid.cols, 2}));
      for (std::size_t t = 0; t < steps; ++t) {
        const auto o = fine_step(g, params, cfg, ctx, fs, off);
        fs = o.state;
        off = o.offsets;
        sr.offsets.push_back(off);
      }
    }
    out.scales.push_back(std::move(sr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoders on plain tensors, used at inference time.

template <typename T>
struct DecoderState {
  Tensor<T> h;
  Tensor<T> c;
  Tensor<T> belief;  // coarse: belief emitted by the last step
};

// Fine-scale coarse decoder stepped one cell choice at a time.
template <typename T>
class CoarseDecoder {
 public:
  CoarseDecoder(const ParameterStore<T>& params, const ModelConfig& cfg, const SceneInputs<T>& in)
      : params_(&params), cfg_(cfg), grid_(in.fine), last_cell_(in.last_cell) {
    Graph<T> g(false);
    const EncoderState enc = encode_history(g, params, cfg, in);
    h0_ = g.value(enc.hidden);
    c0_ = g.value(enc.cell);
    s_bar_ = in.s_bar;
    neighbors_ = NeighborTable::of(grid_);
  }

  const GridSpec& grid() const noexcept { return grid_; }
  CellIndex last_observed() const noexcept { return last_cell_; }

  // State after the first decode step (input: one-hot of the last observed cell).
  DecoderState<T> initial() const {
    return advance_from(h0_, c0_, one_hot_cell<T>(grid_, last_cell_));
  }

  // Feeds the hard one-hot of `chosen` back in.
  DecoderState<T> advance(const DecoderState<T>& s, CellIndex chosen) const {
    return advance_from(s.h, s.c, one_hot_cell<T>(grid_, chosen));
  }

 private:
  DecoderState<T> advance_from(const Tensor<T>& h, const Tensor<T>& c, Tensor<T> fed) const {
    Graph<T> g(false);
    ScaleContext ctx;
    ctx.prefix = scale_prefix(0);
    ctx.grid = grid_;
    ctx.neighbors = neighbors_;
    ctx.s_bar = g.constant(s_bar_);
    const auto o = coarse_step(g, *params_, cfg_, ctx, {g.constant(h), g.constant(c)}, g.constant(std::move(fed)));
    return {g.value(o.state.h), g.value(o.state.c), g.value(o.belief)};
  }

  const ParameterStore<T>* params_;
  ModelConfig cfg_;
  GridSpec grid_;
  CellIndex last_cell_;
  Tensor<T> h0_, c0_, s_bar_;
  NeighborTable neighbors_;
};

// Fine-scale offset fields for `steps` steps. The fine decoder does not
// consume cell choices, so one rollout serves every beam. Zero fields when
// the fine decoder is disabled.
template <typename T>
std::vector<Tensor<T>> rollout_offsets(const ParameterStore<T>& params, const ModelConfig& cfg,
                                       const SceneInputs<T>& in, std::size_t steps) {
  std::vector<Tensor<T>> out;
  if (!cfg.use_fine_decoder) {
    out.assign(steps, Tensor<T>(Shape{in.fine.rows, in.fine.cols, 2}));
    return out;
  }
  Graph<T> g(false);
  const EncoderState enc = encode_history(g, params, cfg, in);
  const ScaleContext ctx = make_scale_context(g, enc, in, 0);
  nn::LstmState st = ctx.init;
  Var off = g.constant(Tensor<T>(Shape{ctx.grid.rows, ctx.grid.cols, 2}));
  for (std::size_t t = 0; t < steps; ++t) {
    const auto o = fine_step(g, params, cfg, ctx, st, off);
    st = o.state;
    off = o.offsets;
    out.push_back(g.value(off));
  }
  return out;
}

}  // namespace mvt
