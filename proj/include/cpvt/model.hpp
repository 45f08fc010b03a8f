#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cpvt/nn.hpp"
#include "cpvt/pos_encoding.hpp"
#include "cpvt/tensor.hpp"
#include "cpvt/token_grid.hpp"

namespace cpvt {

enum class HeadKind { cls, gap };
enum class NormPlacement { pre, post };

HeadKind head_kind_from_string(const std::string& s);
std::string to_string(HeadKind k);
NormPlacement norm_placement_from_string(const std::string& s);
std::string to_string(NormPlacement n);
Precision precision_from_string(const std::string& s);
std::string to_string(Precision p);
Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

// Full architecture description. A config plus a seed determines every
// parameter of the built model.
struct ModelConfig {
  int depth = 12;
  int dim = 192;
  int heads = 3;
  int patch = 16;
  int image_size = 224;
  int in_channels = 3;
  int num_classes = 1000;
  HeadKind head = HeadKind::cls;
  EncodingScheme scheme;
  int ffn_ratio = 4;
  Activation activation = Activation::relu;
  NormPlacement norm = NormPlacement::pre;
  Precision precision = Precision::f64;

  int grid_h() const { return image_size / patch; }
  int grid_w() const { return image_size / patch; }
  bool has_cls() const { return head == HeadKind::cls; }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Flat key=value view of a config (sorted keys). Used for config files and
// the checkpoint header. Unknown keys are a ConfigError; missing keys keep
// their defaults.
std::map<std::string, std::string> model_config_to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);

// True if `key` names a model-config field (and was applied); false if the
// key is not a model field, so callers can route it elsewhere.
bool set_model_config_field(ModelConfig& cfg, const std::string& key,
                            const std::string& value);

// "key=value\n" lines, key-sorted; the canonical serialized form.
std::string config_text(const ModelConfig& cfg);

struct EncoderBlock {
  LayerNormParams ln1;
  MHSAParams attn;
  LayerNormParams ln2;
  FFNParams ffn;
};

struct Model {
  ModelConfig cfg;
  LinearParams patch_proj;  // [C*S*S, d]
  Tensor cls_token;         // [d]; defined only for the cls head
  SchemeState scheme;
  std::vector<EncoderBlock> blocks;
  LayerNormParams final_norm;  // defined only under pre-norm placement
  LinearParams classifier;     // [d, num_classes]
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// Every learnable tensor with a stable name, in checkpoint payload order.
// The returned handles alias the model's storage.
std::vector<std::pair<std::string, Tensor>> named_params(const Model& m);

// Marks every parameter as requiring gradients (training entry point).
void set_trainable(Model& m, bool trainable = true);

// One normalized score matrix for a single (layer, head, batch element).
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  int batch_index = 0;
  Tensor scores;  // [N', N'], detached copy
  std::string normalization = "softmax";
};

struct ForwardOptions {
  // Resize a learnable positional table on the fly when the input grid
  // differs from the build grid (never mutates the stored table).
  bool allow_pe_resize = false;
  // With a non-null `records`, capture attention for this layer, or for
  // every layer when set to -1.
  int attention_layer = -1;
  std::vector<AttentionRecord>* records = nullptr;
};

// Token features after the encoder stack (and final norm under pre-norm
// placement), before pooling and the classifier.
TokenGrid forward_features(const Model& m, const Tensor& images,
                           const ForwardOptions& opt = {});

// images [B,C,H,W] -> logits [B,num_classes].
Tensor forward(const Model& m, const Tensor& images,
               const ForwardOptions& opt = {});

// forward with on-the-fly positional-table resizing enabled; schemes without
// grid-tied state run unchanged at any patch-divisible resolution.
Tensor forward_variable_resolution(const Model& m, const Tensor& images);

// Normalized attention score matrices for every head (and batch element) at
// one layer. Throws InputError if `layer` is out of range.
std::vector<AttentionRecord> attention_scores(const Model& m,
                                              const Tensor& images, int layer);

// Analytic cost report. Convention: one multiply-accumulate = 1 FLOP;
// normalization, softmax, activations, bias adds, and residuals are not
// counted. FLOPs are for one forward pass at the build resolution.
struct CountReport {
  std::int64_t total_params = 0;
  std::int64_t pos_params = 0;  // all positional-scheme parameters
  std::int64_t peg_params = 0;  // conv-generator subset of pos_params
  std::int64_t flops = 0;
  std::int64_t peg_flops = 0;
  std::vector<std::pair<std::string, std::int64_t>> param_groups;
  std::vector<std::pair<std::string, std::int64_t>> flop_groups;
};

CountReport count_params_flops(const Model& m);

}  // namespace cpvt
