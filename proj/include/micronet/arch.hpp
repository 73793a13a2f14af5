#pragma once

// Declarative architecture descriptions. A config is a short text document
// with header keys plus one row per stage, mirroring the published table
// columns (kind, k, C, C/R, (G1, G2), stride). Rows expand into a flat
// "layer plan" of primitive layers (convs, norms, activations, shuffles,
// pools, FCs, upsamples, skip-adds); the plan is the single source of truth
// shared by network construction and cost accounting. Row semantics:
//
//   stem     input -> conv k x 1 stride (2,1) to C/R -> conv 1 x k stride
//            (1,2) with G2 groups to C -> ReLU. Output C at half resolution.
//   micro-a  lite block: factorized depthwise expands input to C (so the
//            multiplier t = C / C_in), then one grouped 1x1 squeezes to C/R.
//            Output C/R.
//   micro-b  transition block: factorized depthwise expands by t (default 4),
//            grouped 1x1 squeeze to C/R, shuffle, grouped 1x1 expand to C.
//   micro-c  main block: non-expanding factorized depthwise, then the
//            squeeze/shuffle/expand pointwise pair; skip-add when the input
//            channel count equals C and stride is 1.
//   upsample bilinear x2 (keypoint heads).
//   heatmap  1x1 conv (with bias) to the keypoint channel count.
//   classifier  global average pool -> FC(hidden) -> ReLU -> dropout ->
//            FC(classes); logits out.
//
// Activations sit after a batch norm at the published sites (A1 after the
// depthwise pair, A2 between the pointwise factors after the shuffle, A3
// after the expansion); the stem always uses ReLU. Shift-max groups follow
// the block's G1, since the shift is what bridges those groups.

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/factorized.hpp"
#include "micronet/kernels.hpp"
#include "micronet/shift_max.hpp"

namespace micronet {

enum class RowKind { Stem, MicroA, MicroB, MicroC, Upsample, Heatmap, Classifier };

inline const char* row_kind_name(RowKind k) {
  switch (k) {
    case RowKind::Stem: return "stem";
    case RowKind::MicroA: return "micro-a";
    case RowKind::MicroB: return "micro-b";
    case RowKind::MicroC: return "micro-c";
    case RowKind::Upsample: return "upsample";
    case RowKind::Heatmap: return "heatmap";
    case RowKind::Classifier: return "classifier";
  }
  return "?";
}

struct BlockRow {
  RowKind kind = RowKind::MicroC;
  int k = 3;      // kernel size
  int c = 0;      // C column (depthwise output for micro-a, block output else)
  int c_mid = 0;  // C/R column (block output for micro-a, bottleneck else)
  int g1 = 1;
  int g2 = 0;     // 0 where the table leaves it blank
  int stride = 1;
  int t = 0;      // depthwise multiplier; 0 = derive (a: C/C_in, b: 4, c: 1)

  std::string str() const {
    std::ostringstream os;
    os << row_kind_name(kind);
    if (kind == RowKind::Heatmap) {
      os << " c=" << c;
    } else if (kind != RowKind::Classifier && kind != RowKind::Upsample) {
      os << " k=" << k << " c=" << c << " cmid=" << c_mid << " g=" << g1 << ","
         << (g2 > 0 ? std::to_string(g2) : std::string("-")) << " s=" << stride;
      if (t > 0) os << " t=" << t;
    }
    return os.str();
  }
};

enum class ActKind { ReLU, ShiftMax };

struct ArchSpec {
  std::string name;
  int input_h = 224, input_w = 224, input_c = 3;
  int num_classes = 1000;
  int classifier_hidden = 1024;
  double classifier_dropout = 0.05;
  ActKind activation = ActKind::ShiftMax;
  int hyper_reduction = 16;  // shift-max generator squeeze ratio r
  int shift_j = 2, shift_k = 2;
  double shift_gamma = 0.5;
  std::vector<BlockRow> rows;

  bool is_keypoint() const {
    for (const auto& r : rows) {
      if (r.kind == RowKind::Heatmap) return true;
    }
    return false;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse integer '" + s + "' for " + what);
  }
}

}  // namespace detail

/// Parses the text config format. Unknown keys and malformed rows raise
/// ConfigError with the line number.
inline ArchSpec parse_arch_config(const std::string& text) {
  ArchSpec a;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  bool saw_name = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = detail::trim(hash == std::string::npos
                                        ? raw
                                        : raw.substr(0, hash));
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    const std::string where = "line " + std::to_string(line_no);

    if (head == "name") {
      ls >> a.name;
      saw_name = true;
    } else if (head == "input") {
      std::string v;
      ls >> v;
      const auto x = v.find('x');
      if (x == std::string::npos) {
        throw ConfigError(where + ": input wants HxW, got '" + v + "'");
      }
      a.input_h = detail::parse_int(v.substr(0, x), "input height");
      a.input_w = detail::parse_int(v.substr(x + 1), "input width");
    } else if (head == "classes") {
      std::string v;
      ls >> v;
      a.num_classes = detail::parse_int(v, "classes");
    } else if (head == "hidden") {
      std::string v;
      ls >> v;
      a.classifier_hidden = detail::parse_int(v, "hidden");
    } else if (head == "dropout") {
      std::string v;
      ls >> v;
      a.classifier_dropout = std::stod(v);
    } else if (head == "activation") {
      std::string v;
      ls >> v;
      if (v == "relu") {
        a.activation = ActKind::ReLU;
      } else if (v == "shift-max") {
        a.activation = ActKind::ShiftMax;
      } else {
        throw ConfigError(where + ": unknown activation '" + v + "'");
      }
    } else if (head == "hyper-reduction") {
      std::string v;
      ls >> v;
      a.hyper_reduction = detail::parse_int(v, "hyper-reduction");
    } else if (head == "shift-j") {
      std::string v;
      ls >> v;
      a.shift_j = detail::parse_int(v, "shift-j");
    } else if (head == "shift-k") {
      std::string v;
      ls >> v;
      a.shift_k = detail::parse_int(v, "shift-k");
    } else if (head == "shift-gamma") {
      std::string v;
      ls >> v;
      a.shift_gamma = std::stod(v);
    } else if (head == "stem" || head == "micro-a" || head == "micro-b" ||
               head == "micro-c" || head == "upsample" || head == "heatmap" ||
               head == "classifier") {
      BlockRow r;
      if (head == "stem") r.kind = RowKind::Stem;
      if (head == "micro-a") r.kind = RowKind::MicroA;
      if (head == "micro-b") r.kind = RowKind::MicroB;
      if (head == "micro-c") r.kind = RowKind::MicroC;
      if (head == "upsample") r.kind = RowKind::Upsample;
      if (head == "heatmap") r.kind = RowKind::Heatmap;
      if (head == "classifier") r.kind = RowKind::Classifier;
      std::string kv;
      while (ls >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
          throw ConfigError(where + ": expected key=value, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string val = kv.substr(eq + 1);
        if (key == "k") {
          r.k = detail::parse_int(val, "k");
        } else if (key == "c") {
          r.c = detail::parse_int(val, "c");
        } else if (key == "cmid") {
          r.c_mid = detail::parse_int(val, "cmid");
        } else if (key == "s") {
          r.stride = detail::parse_int(val, "s");
        } else if (key == "t") {
          r.t = detail::parse_int(val, "t");
        } else if (key == "g") {
          const auto comma = val.find(',');
          if (comma == std::string::npos) {
            throw ConfigError(where + ": g wants G1,G2");
          }
          r.g1 = detail::parse_int(val.substr(0, comma), "G1");
          const std::string g2s = val.substr(comma + 1);
          r.g2 = (g2s == "-") ? 0 : detail::parse_int(g2s, "G2");
        } else {
          throw ConfigError(where + ": unknown row key '" + key + "'");
        }
      }
      a.rows.push_back(r);
    } else {
      throw ConfigError(where + ": unknown directive '" + head + "'");
    }
  }
  if (!saw_name || a.rows.empty()) {
    throw ConfigError("config needs a name and at least one row");
  }
  return a;
}

/// Serializes a spec back into the config text format; parses to an
/// equivalent spec (used to embed the architecture in weight bundles).
inline std::string arch_config_text(const ArchSpec& a) {
  std::ostringstream os;
  os << "name " << a.name << "\n";
  os << "input " << a.input_h << "x" << a.input_w << "\n";
  os << "classes " << a.num_classes << "\n";
  os << "hidden " << a.classifier_hidden << "\n";
  os << "dropout " << a.classifier_dropout << "\n";
  os << "activation "
     << (a.activation == ActKind::ReLU ? "relu" : "shift-max") << "\n";
  os << "hyper-reduction " << a.hyper_reduction << "\n";
  os << "shift-j " << a.shift_j << "\n";
  os << "shift-k " << a.shift_k << "\n";
  os << "shift-gamma " << a.shift_gamma << "\n";
  for (const auto& r : a.rows) os << r.str() << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Layer plan
// ---------------------------------------------------------------------------

enum class PrimKind {
  Conv,
  BatchNorm,
  ReLU,
  ShiftMax,
  Shuffle,
  GlobalPool,
  FullyConnected,
  Dropout,
  Upsample,
  SkipAdd,
  AttentionPassthrough,  // identity stand-in, flagged excluded in reports
};

struct PrimLayer {
  PrimKind kind = PrimKind::Conv;
  std::string name;
  Shape4 in_shape{0, 0, 0, 0}, out_shape{0, 0, 0, 0};
  Conv2dSpec conv;        // Conv
  bool conv_bias = false; // Conv
  std::vector<int> perm;  // Shuffle
  ShiftMaxConfig smax;    // ShiftMax
  int fc_in = 0, fc_out = 0;  // FullyConnected
  double drop_p = 0.0;        // Dropout
  int skip_src = -1;  // SkipAdd: plan index whose output is added (-1 = input)
  bool classifier_part = false;  // marked for --exclude classifier
};

/// Per-row shape summary used by the CLI's architecture table.
struct RowSummary {
  BlockRow row;
  Shape4 out_shape{0, 0, 0, 0};
};

struct LayerPlan {
  std::vector<PrimLayer> layers;
  std::vector<RowSummary> summaries;
  Shape4 input_shape{0, 0, 0, 0};
  Shape4 output_shape{0, 0, 0, 0};
};

namespace detail {

[[noreturn]] inline void row_error(int idx, const BlockRow& row,
                                   const std::string& msg) {
  throw ConfigError("row " + std::to_string(idx) + " (" + row.str() + "): " +
                    msg);
}

inline void require_divides(int idx, const BlockRow& row, int d, int n,
                            const std::string& what) {
  if (d < 1 || n % d != 0) {
    row_error(idx, row,
              what + ": " + std::to_string(d) + " does not divide " +
                  std::to_string(n));
  }
}

}  // namespace detail

/// Expands config rows into primitive layers, validating divisibility and
/// shape compatibility. Throws ConfigError naming the offending row.
///
/// With full_rank = true the plan describes the unfactorized twin used as a
/// mutual-learning partner: each depthwise k x 1 / 1 x k pair becomes one
/// full k x k depthwise conv, each squeeze/shuffle/expand pointwise pair
/// becomes one dense 1x1 conv (the mid activation disappears with the mid
/// channels), and the stem collapses to one dense k x k conv. Layer widths,
/// strides, and activations at surviving sites are identical to the student.
inline LayerPlan build_plan(const ArchSpec& arch, int input_h, int input_w,
                            int batch = 1, bool full_rank = false) {
  LayerPlan plan;
  plan.input_shape = {batch, arch.input_c, input_h, input_w};
  Shape4 cur = plan.input_shape;
  int last_idx = -1;  // plan index producing `cur` (-1 = network input)
  int block_no = 0;
  int up_no = 0;

  auto push = [&](PrimLayer l) {
    plan.layers.push_back(std::move(l));
    last_idx = static_cast<int>(plan.layers.size()) - 1;
    cur = plan.layers.back().out_shape;
  };
  auto push_conv = [&](const std::string& name, const Conv2dSpec& s,
                       bool bias = false) {
    PrimLayer l;
    l.kind = PrimKind::Conv;
    l.name = name;
    l.in_shape = cur;
    l.out_shape = conv2d_out_shape(cur, s);
    l.conv = s;
    l.conv_bias = bias;
    push(std::move(l));
  };
  auto push_bn = [&](const std::string& name) {
    PrimLayer l;
    l.kind = PrimKind::BatchNorm;
    l.name = name;
    l.in_shape = l.out_shape = cur;
    push(std::move(l));
  };
  auto push_act = [&](const std::string& name, int groups, int row_idx,
                      const BlockRow& row) {
    PrimLayer l;
    l.name = name;
    l.in_shape = l.out_shape = cur;
    if (arch.activation == ActKind::ReLU) {
      l.kind = PrimKind::ReLU;
    } else {
      l.kind = PrimKind::ShiftMax;
      ShiftMaxConfig cfg;
      cfg.channels = cur.c;
      cfg.groups = groups;
      cfg.j_terms = arch.shift_j;
      cfg.k_branches = arch.shift_k;
      cfg.hidden = hyper_hidden_width(cur.c, arch.hyper_reduction);
      cfg.gamma = arch.shift_gamma;
      cfg.theta = ShiftMaxConfig::default_theta(cfg.k_branches, cfg.j_terms);
      if (cur.c % groups != 0) {
        detail::row_error(row_idx, row,
                          "activation groups " + std::to_string(groups) +
                              " do not divide channels " +
                              std::to_string(cur.c));
      }
      if (cfg.j_terms > groups) {
        detail::row_error(row_idx, row,
                          "activation needs J <= G, got J=" +
                              std::to_string(cfg.j_terms) + ", G=" +
                              std::to_string(groups));
      }
      cfg.validate();
      l.smax = cfg;
    }
    push(std::move(l));
  };
  auto push_relu = [&](const std::string& name) {
    PrimLayer l;
    l.kind = PrimKind::ReLU;
    l.name = name;
    l.in_shape = l.out_shape = cur;
    push(std::move(l));
  };

  // Factorized-depthwise pair: k x 1 (vertical stride) then 1 x k
  // (horizontal stride) carrying the channel multiplier t. The full-rank twin
  // uses a single k x k depthwise conv instead.
  auto push_dw_pair = [&](const std::string& prefix, int k, int stride, int t) {
    const int c_in = cur.c;
    if (full_rank) {
      Conv2dSpec f;
      f.out_channels = c_in * t;
      f.groups = c_in;
      f.kernel_h = f.kernel_w = k;
      f.stride_h = f.stride_w = stride;
      f.pad_h = f.pad_w = (k - 1) / 2;
      push_conv(prefix + ".dw_kxk", f);
      push_bn(prefix + ".bn_dw");
      return;
    }
    Conv2dSpec v;
    v.out_channels = c_in;
    v.groups = c_in;
    v.kernel_h = k;
    v.stride_h = stride;
    v.pad_h = (k - 1) / 2;
    push_conv(prefix + ".dw_kx1", v);
    push_bn(prefix + ".bn_dw1");
    Conv2dSpec h;
    h.out_channels = c_in * t;
    h.groups = c_in;
    h.kernel_w = k;
    h.stride_w = stride;
    h.pad_w = (k - 1) / 2;
    push_conv(prefix + ".dw_1xk", h);
    push_bn(prefix + ".bn_dw2");
  };

  bool saw_terminal = false;
  for (std::size_t i = 0; i < arch.rows.size(); ++i) {
    const BlockRow& row = arch.rows[i];
    const int idx = static_cast<int>(i);
    if (saw_terminal) {
      detail::row_error(idx, row, "rows after the classifier/heatmap head");
    }
    const int block_input_idx = last_idx;
    const Shape4 block_in = cur;

    switch (row.kind) {
      case RowKind::Stem: {
        if (row.c_mid < 1 || row.c < 1) {
          detail::row_error(idx, row, "stem wants c and cmid");
        }
        const int g2 = row.g2 > 0 ? row.g2 : 1;
        detail::require_divides(idx, row, g2, row.c_mid, "stem G2 vs C/R");
        detail::require_divides(idx, row, g2, row.c, "stem G2 vs C");
        if (full_rank) {
          Conv2dSpec cf;
          cf.out_channels = row.c;
          cf.kernel_h = cf.kernel_w = row.k;
          cf.stride_h = cf.stride_w = 2;
          cf.pad_h = cf.pad_w = (row.k - 1) / 2;
          push_conv("stem.conv_kxk", cf);
          push_bn("stem.bn");
          push_relu("stem.relu");
          break;
        }
        Conv2dSpec c1;
        c1.out_channels = row.c_mid;
        c1.kernel_h = row.k;
        c1.stride_h = 2;
        c1.pad_h = (row.k - 1) / 2;
        push_conv("stem.conv_kx1", c1);
        push_bn("stem.bn1");
        Conv2dSpec c2;
        c2.out_channels = row.c;
        c2.groups = g2;
        c2.kernel_w = row.k;
        c2.stride_w = 2;
        c2.pad_w = (row.k - 1) / 2;
        push_conv("stem.conv_1xk", c2);
        push_bn("stem.bn2");
        push_relu("stem.relu");
        break;
      }
      case RowKind::MicroA: {
        ++block_no;
        const std::string p = "blk" + std::to_string(block_no);
        if (row.c < 1 || row.c_mid < 1) {
          detail::row_error(idx, row, "micro-a wants c and cmid");
        }
        int t = row.t;
        if (t == 0) {
          if (row.c % block_in.c != 0) {
            detail::row_error(idx, row,
                              "depthwise output " + std::to_string(row.c) +
                                  " not a multiple of input channels " +
                                  std::to_string(block_in.c));
          }
          t = row.c / block_in.c;
        } else if (block_in.c * t != row.c) {
          detail::row_error(idx, row, "t is inconsistent with C");
        }
        detail::require_divides(idx, row, row.g1, row.c, "G1 vs C");
        detail::require_divides(idx, row, row.g1, row.c_mid, "G1 vs C/R");
        push_dw_pair(p, row.k, row.stride, t);
        push_act(p + ".act1", row.g1, idx, row);
        Conv2dSpec q;
        q.out_channels = row.c_mid;
        q.groups = full_rank ? 1 : row.g1;
        push_conv(p + ".squeeze", q);
        push_bn(p + ".bn_sq");
        push_act(p + ".act2", row.g1, idx, row);
        if (block_in.c == cur.c && row.stride == 1) {
          PrimLayer l;
          l.kind = PrimKind::SkipAdd;
          l.name = p + ".skip";
          l.in_shape = l.out_shape = cur;
          l.skip_src = block_input_idx;
          push(std::move(l));
        }
        break;
      }
      case RowKind::MicroB:
      case RowKind::MicroC: {
        ++block_no;
        const std::string p = "blk" + std::to_string(block_no);
        const bool is_b = row.kind == RowKind::MicroB;
        if (row.c < 1 || row.c_mid < 1) {
          detail::row_error(idx, row, "block wants c and cmid");
        }
        const int t = row.t > 0 ? row.t : (is_b ? 4 : 1);
        const int dw_out = block_in.c * t;
        const int g2 = row.g2 > 0 ? row.g2 : 1;
        detail::require_divides(idx, row, row.g1, dw_out,
                                "G1 vs depthwise output");
        detail::require_divides(idx, row, row.g1, row.c_mid, "G1 vs C/R");
        detail::require_divides(idx, row, g2, row.c_mid, "G2 vs C/R");
        detail::require_divides(idx, row, g2, row.c, "G2 vs C");
        push_dw_pair(p, row.k, row.stride, t);
        push_act(p + ".act1", row.g1, idx, row);
        if (full_rank) {
          Conv2dSpec dense;
          dense.out_channels = row.c;
          push_conv(p + ".pointwise", dense);
          push_bn(p + ".bn_pw");
        } else {
          Conv2dSpec q;
          q.out_channels = row.c_mid;
          q.groups = row.g1;
          push_conv(p + ".squeeze", q);
          push_bn(p + ".bn_sq");
          PrimLayer sh;
          sh.kind = PrimKind::Shuffle;
          sh.name = p + ".shuffle";
          sh.in_shape = sh.out_shape = cur;
          sh.perm = channel_shuffle_perm(row.c_mid, row.g1);
          push(std::move(sh));
          push_act(p + ".act2", row.g1, idx, row);
          Conv2dSpec pc;
          pc.out_channels = row.c;
          pc.groups = g2;
          push_conv(p + ".expand", pc);
          push_bn(p + ".bn_ex");
        }
        push_act(p + ".act3", row.g1, idx, row);
        if (block_in.c == cur.c && row.stride == 1) {
          PrimLayer l;
          l.kind = PrimKind::SkipAdd;
          l.name = p + ".skip";
          l.in_shape = l.out_shape = cur;
          l.skip_src = block_input_idx;
          push(std::move(l));
        }
        break;
      }
      case RowKind::Upsample: {
        ++up_no;
        PrimLayer l;
        l.kind = PrimKind::Upsample;
        l.name = "up" + std::to_string(up_no);
        l.in_shape = cur;
        l.out_shape = {cur.n, cur.c, cur.h * 2, cur.w * 2};
        push(std::move(l));
        break;
      }
      case RowKind::Heatmap: {
        if (row.c < 1) detail::row_error(idx, row, "heatmap wants c");
        {
          PrimLayer l;
          l.kind = PrimKind::AttentionPassthrough;
          l.name = "head.attention_passthrough";
          l.in_shape = l.out_shape = cur;
          push(std::move(l));
        }
        Conv2dSpec hc;
        hc.out_channels = row.c;
        push_conv("head.heatmap", hc, /*bias=*/true);
        saw_terminal = true;
        break;
      }
      case RowKind::Classifier: {
        PrimLayer pool;
        pool.kind = PrimKind::GlobalPool;
        pool.name = "classifier.pool";
        pool.in_shape = cur;
        pool.out_shape = {cur.n, cur.c, 1, 1};
        pool.classifier_part = true;
        push(std::move(pool));
        PrimLayer fc1;
        fc1.kind = PrimKind::FullyConnected;
        fc1.name = "classifier.fc1";
        fc1.in_shape = cur;
        fc1.fc_in = cur.c;
        fc1.fc_out = arch.classifier_hidden;
        fc1.out_shape = {cur.n, arch.classifier_hidden, 1, 1};
        fc1.classifier_part = true;
        push(std::move(fc1));
        {
          PrimLayer l;
          l.kind = PrimKind::ReLU;
          l.name = "classifier.relu";
          l.in_shape = l.out_shape = cur;
          l.classifier_part = true;
          push(std::move(l));
        }
        {
          PrimLayer l;
          l.kind = PrimKind::Dropout;
          l.name = "classifier.dropout";
          l.in_shape = l.out_shape = cur;
          l.drop_p = arch.classifier_dropout;
          l.classifier_part = true;
          push(std::move(l));
        }
        PrimLayer fc2;
        fc2.kind = PrimKind::FullyConnected;
        fc2.name = "classifier.fc2";
        fc2.in_shape = cur;
        fc2.fc_in = cur.c;
        fc2.fc_out = arch.num_classes;
        fc2.out_shape = {cur.n, arch.num_classes, 1, 1};
        fc2.classifier_part = true;
        push(std::move(fc2));
        saw_terminal = true;
        break;
      }
    }
    plan.summaries.push_back({row, cur});
  }
  if (!saw_terminal) {
    throw ConfigError("config must end in a classifier or heatmap row");
  }
  plan.output_shape = cur;
  return plan;
}

inline LayerPlan build_plan(const ArchSpec& arch, int batch = 1) {
  return build_plan(arch, arch.input_h, arch.input_w, batch);
}

/// Dry-run validation: expands the plan at the nominal resolution.
inline void validate_arch(const ArchSpec& arch) { build_plan(arch, 1); }

}  // namespace micronet
