#include "nerftap/faceid/faceid.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>

#include "nerftap/diff/optim.hpp"
#include "nerftap/util/hash.hpp"
#include "nerftap/util/rng.hpp"

namespace nerftap::faceid {

namespace {

const std::vector<ArchSpec>& arch_table() {
  static const std::vector<ArchSpec> table = {
      {'A', {16, 32, 32}, 0},
      {'B', {12, 24, 48, 48}, 0},
      {'C', {8, 16, 32}, 1},
      {'D', {24, 24}, 1},
      {'E', {12, 24, 24}, 0},
  };
  return table;
}

int pooled_side(const ArchSpec& spec) {
  int side = kInputSize;
  for (std::size_t i = 0; i < spec.stages.size() + std::size_t(spec.extra_pools); ++i) side /= 2;
  return side;
}

}  // namespace

bool is_arch(char id) {
  for (const ArchSpec& s : arch_table())
    if (s.id == id) return true;
  return false;
}

const ArchSpec& arch_spec(char id) {
  for (const ArchSpec& s : arch_table())
    if (s.id == id) return s;
  throw std::invalid_argument(std::string("unknown embedder architecture '") + id + "'");
}

Embedder make_embedder(char arch, std::uint64_t seed) {
  const ArchSpec& spec = arch_spec(arch);
  Rng rng = Rng::stream(seed, std::string("embedder.") + arch);
  Embedder m;
  m.arch = arch;
  m.seed = seed;
  int in = 3;
  for (int out : spec.stages) {
    Tensor w({out, in, 3, 3});
    rng.fill_normal(w.data, std::sqrt(2.0 / (9.0 * in)));
    m.conv_w.push_back(std::move(w));
    m.conv_b.emplace_back(diff::Shape{out});
    in = out;
  }
  const int side = pooled_side(spec);
  const int flat = in * side * side;
  m.fc_w = Tensor({flat, kEmbeddingDim});
  rng.fill_normal(m.fc_w.data, 1.0 / std::sqrt(double(flat)));
  m.fc_b = Tensor({kEmbeddingDim});
  return m;
}

std::size_t parameter_count(const Embedder& model) {
  std::size_t n = 0;
  model.visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

std::string checkpoint_name(const Embedder& model) {
  return std::string("embedder.") + model.arch + "." + std::to_string(model.seed);
}

diff::TensorMap to_tensor_map(const Embedder& model) {
  diff::TensorMap out;
  model.visit([&](const std::string& name, const Tensor& t) { out.emplace(name, Tensor(t.shape, t.data)); });
  return out;
}

Embedder embedder_from_tensor_map(char arch, std::uint64_t seed, const diff::TensorMap& tensors) {
  Embedder m = make_embedder(arch, seed);
  m.visit([&](const std::string& name, Tensor& t) { t.data = diff::blob_get(tensors, name, t.shape).data; });
  return m;
}

std::string parameter_hash(const Embedder& model) { return sha256_hex(diff::encode_blob(to_tensor_map(model))); }

namespace {

/// Sampling coordinates of the aligned grid inside an S x S image, cached per S.
template <class T>
const TensorT<T>& align_coords(int S) {
  static std::mutex mu;
  static std::map<int, TensorT<T>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(S);
  if (it != cache.end()) return it->second;
  const double crop = kCropFraction * S;
  const double origin = 0.5 * (S - crop);
  const double step = crop / kInputSize;
  TensorT<T> c({kInputSize * kInputSize, 2});
  for (int r = 0; r < kInputSize; ++r)
    for (int q = 0; q < kInputSize; ++q) {
      const std::size_t i = std::size_t(r) * kInputSize + q;
      c.data[2 * i] = T(origin + (q + 0.5) * step - 0.5);
      c.data[2 * i + 1] = T(origin + (r + 0.5) * step - 0.5);
    }
  return cache.emplace(S, std::move(c)).first->second;
}

}  // namespace

template <class T>
Var align(GraphT<T>& graph, Var x) {
  const diff::Shape& s = graph.shape(x);
  if (s.size() != 3 || s[0] != 3 || s[1] != s[2]) throw diff::ShapeError("align", {3, -1, -1}, s);
  if (s[1] < 2) throw diff::ShapeError("align", {3, kInputSize, kInputSize}, s);
  Var sampled = graph.grid_sample(x, graph.param(align_coords<T>(s[1])));
  return graph.reshape(sampled, {3, kInputSize, kInputSize});
}

Tensor align(const Tensor& x) {
  diff::Graph graph;
  return graph.value(align(graph, graph.param(x)));
}

template <class T, class M>
Var embed(GraphT<T>& graph, M& model, Var aligned) {
  const diff::Shape& s = graph.shape(aligned);
  if (s != diff::Shape{3, kInputSize, kInputSize}) throw diff::ShapeError("embed", {3, kInputSize, kInputSize}, s);
  const ArchSpec& spec = arch_spec(model.arch);
  Var h = graph.add_scalar(aligned, T(-0.5));
  for (std::size_t i = 0; i < model.conv_w.size(); ++i) {
    h = graph.conv2d(h, graph.param(model.conv_w[i]), graph.param(model.conv_b[i]));
    h = graph.avg_pool2(graph.leaky_relu(h));
  }
  for (int i = 0; i < spec.extra_pools; ++i) h = graph.avg_pool2(h);
  const int flat = int(diff::shape_numel(graph.shape(h)));
  Var y = graph.linear(graph.reshape(h, {1, flat}), graph.param(model.fc_w), graph.param(model.fc_b));
  y = graph.reshape(y, {kEmbeddingDim});
  return graph.div(y, graph.l2_norm(y));
}

Tensor embed(const Embedder& model, const Tensor& aligned) {
  diff::Graph graph;
  return graph.value(embed(graph, model, graph.param(aligned)));
}

Tensor embed_face(const Embedder& model, const Tensor& image) {
  diff::Graph graph;
  return graph.value(embed(graph, model, align(graph, graph.param(image))));
}

template Var align<float>(GraphT<float>&, Var);
template Var align<double>(GraphT<double>&, Var);
template Var embed<float, Embedder>(GraphT<float>&, Embedder&, Var);
template Var embed<float, const Embedder>(GraphT<float>&, const Embedder&, Var);
template Var embed<double, EmbedderT<double>>(GraphT<double>&, EmbedderT<double>&, Var);
template Var embed<double, const EmbedderT<double>>(GraphT<double>&, const EmbedderT<double>&, Var);

double cosine(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw diff::ShapeError("cosine", a.shape, b.shape);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    ab += double(a.data[i]) * b.data[i];
    aa += double(a.data[i]) * a.data[i];
    bb += double(b.data[i]) * b.data[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::vector<Embedder> make_model_zoo(const std::vector<std::uint64_t>& seeds, const std::vector<char>& archs) {
  if (seeds.empty() || archs.empty()) throw std::invalid_argument("model zoo needs at least one seed and one arch");
  if (seeds.size() != 1 && seeds.size() != archs.size()) {
    throw std::invalid_argument("model zoo needs one seed or one seed per arch");
  }
  std::vector<Embedder> zoo;
  for (std::size_t i = 0; i < archs.size(); ++i) zoo.push_back(make_embedder(archs[i], seeds.size() == 1 ? seeds[0] : seeds[i]));
  return zoo;
}

std::size_t IdentitySet::image_count() const {
  std::size_t n = 0;
  for (const Identity& id : identities) n += id.views.size();
  return n;
}

IdentitySet synthesize_identity_set(const radiance::RadianceModel& model, int n_ids, int views_per_id,
                                    const PoseRange& range, std::uint64_t seed) {
  if (n_ids < 2) throw std::invalid_argument("an identity set needs at least two identities");
  if (views_per_id < 2) throw std::invalid_argument("an identity set needs at least two views per identity");
  if (!(range.yaw_min <= range.yaw_max)) throw std::invalid_argument("pose range needs yaw_min <= yaw_max");
  IdentitySet set;
  radiance::RadianceModel m = model;
  for (int i = 0; i < n_ids; ++i) {
    Rng rng = Rng::stream(seed, "identity", std::uint64_t(i));
    Identity id;
    id.id = i;
    id.w = radiance::random_latent(model.config, rng);
    m.w = id.w;
    for (int v = 0; v < views_per_id; ++v) {
      const double yaw = range.yaw_min + (range.yaw_max - range.yaw_min) * v / (views_per_id - 1);
      const Pose pose{yaw, range.pitch};
      id.views.push_back({pose, radiance::synthesize(m, pose)});
    }
    set.identities.push_back(std::move(id));
  }
  return set;
}

namespace {

bool is_heldout(int view, int every) { return every > 0 && view % every == every - 1; }

struct AlignedSet {
  std::vector<std::vector<Tensor>> train, heldout, all;
};

AlignedSet align_set(const IdentitySet& set, int holdout_every) {
  AlignedSet out;
  for (const Identity& id : set.identities) {
    out.train.emplace_back();
    out.heldout.emplace_back();
    out.all.emplace_back();
    for (std::size_t v = 0; v < id.views.size(); ++v) {
      Tensor a = align(id.views[v].image);
      (is_heldout(int(v), holdout_every) ? out.heldout : out.train).back().push_back(a);
      out.all.back().push_back(std::move(a));
    }
  }
  return out;
}

double margin_of(const Embedder& model, const std::vector<std::vector<Tensor>>& groups) {
  std::vector<std::vector<Tensor>> e(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i)
    for (const Tensor& img : groups[i]) e[i].push_back(embed(model, img));
  double same = 0, diff_sum = 0;
  std::size_t n_same = 0, n_diff = 0;
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t a = 0; a < e[i].size(); ++a) {
      for (std::size_t b = a + 1; b < e[i].size(); ++b, ++n_same) same += cosine(e[i][a], e[i][b]);
      for (std::size_t j = i + 1; j < e.size(); ++j)
        for (const Tensor& other : e[j]) {
          diff_sum += cosine(e[i][a], other);
          ++n_diff;
        }
    }
  if (n_same == 0 || n_diff == 0) throw std::invalid_argument("separation margin needs two views per identity and two identities");
  return same / double(n_same) - diff_sum / double(n_diff);
}

}  // namespace

double separation_margin(const Embedder& model, const IdentitySet& set, int holdout_every, bool heldout) {
  AlignedSet a = align_set(set, holdout_every);
  return margin_of(model, heldout ? a.heldout : a.all);
}

std::vector<SmokeTrainReport> train_zoo_smoke(std::vector<Embedder>& zoo, const IdentitySet& set,
                                              const SmokeTrainConfig& config) {
  if (set.identities.size() < 8) throw std::invalid_argument("smoke training needs at least 8 identities");
  for (const Identity& id : set.identities)
    if (id.views.size() < 4) throw std::invalid_argument("smoke training needs at least 4 views per identity");
  if (config.epochs < 1 || config.min_epochs > config.epochs || config.eval_every < 1 || config.holdout_every < 2) {
    throw std::invalid_argument("smoke training needs 1 <= min_epochs <= epochs, eval_every >= 1 and holdout_every >= 2");
  }
  const AlignedSet data = align_set(set, config.holdout_every);
  const int n_ids = int(data.train.size());
  const int batch = 2 * n_ids;

  // Pair weights: same-identity pairs pull toward cosine 1, others push below 0.
  TensorT<float> same_w({batch, batch}), diff_w({batch, batch});
  for (int a = 0; a < batch; ++a)
    for (int b = 0; b < batch; ++b) {
      if (a == b) continue;
      (a / 2 == b / 2 ? same_w : diff_w).data[std::size_t(a) * batch + b] = 1.0f;
    }
  for (auto* w : {&same_w, &diff_w}) {
    float total = 0;
    for (float v : w->data) total += v;
    for (float& v : w->data) v /= total;
  }

  std::vector<SmokeTrainReport> reports;
  for (Embedder& model : zoo) {
    std::vector<Tensor*> params = radiance::param_list(model);
    for (Tensor* p : params) p->requires_grad = true;
    diff::AdamState opt;
    Rng rng = Rng::stream(config.seed, std::string("smoke.") + model.arch, model.seed);
    double margin = margin_of(model, data.heldout);
    int epoch = 0;
    while ((margin < config.target_margin || epoch < config.min_epochs) && epoch < config.epochs) {
      diff::Graph graph;
      std::vector<Var> rows;
      for (int i = 0; i < n_ids; ++i) {
        const auto& views = data.train[std::size_t(i)];
        const std::size_t first = rng.below(views.size());
        std::size_t second = rng.below(views.size() - 1);
        if (second >= first) ++second;
        for (std::size_t v : {first, second}) {
          rows.push_back(graph.reshape(embed(graph, model, graph.param(views[v])), {1, kEmbeddingDim}));
        }
      }
      Var e = graph.concat(rows);
      Var cos = graph.matmul(e, graph.transpose(e));
      Var pull = graph.sum(graph.mul(cos, graph.param(same_w)));
      Var push = graph.sum(graph.mul(graph.relu(cos), graph.param(diff_w)));
      Var loss = graph.add(graph.sub(graph.scalar(1.0f), pull), push);
      if (!std::isfinite(graph.item(loss))) {
        throw diff::NumericError("smoke training: non-finite loss at epoch " + std::to_string(epoch));
      }
      diff::zero_grads<float>(params);
      graph.backward(loss);
      diff::adam_step<float>(opt, params, float(config.lr));
      ++epoch;
      if (epoch % config.eval_every == 0 || epoch == config.epochs) margin = margin_of(model, data.heldout);
    }
    if (margin < config.target_margin) {
      std::ostringstream msg;
      msg << "embedder " << model.arch << " reached held-out margin " << margin << " < " << config.target_margin
          << " after " << epoch << " epochs";
      throw std::runtime_error(msg.str());
    }
    for (Tensor* p : params) {
      p->requires_grad = false;
      p->grad.clear();
    }
    reports.push_back({model.arch, epoch, margin});
  }
  return reports;
}

}  // namespace nerftap::faceid
