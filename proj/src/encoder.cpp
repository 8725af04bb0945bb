#include "sugar/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sugar {

int EncoderConfig::max_kernel() const {
  return temporal_kernels.empty() ? 0 : *std::max_element(temporal_kernels.begin(), temporal_kernels.end());
}

void EncoderConfig::validate() const {
  if (feature_dims.empty()) throw ConfigError("encoder needs at least one block");
  for (int f : feature_dims) {
    if (f <= 0) throw ConfigError("encoder feature dims must be positive");
  }
  if (temporal_kernels.empty()) throw ConfigError("encoder needs at least one temporal kernel");
  for (int k : temporal_kernels) {
    if (k < 1 || k % 2 == 0) throw ConfigError("temporal kernel sizes must be odd and >= 1");
  }
  if (in_channels <= 0 || projection_dim <= 0) throw ConfigError("encoder dims must be positive");
  if (!(input_scale > 0.0)) throw ConfigError("encoder input scale must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"feature_dims", feature_dims},
          {"temporal_kernels", temporal_kernels},
          {"in_channels", in_channels},
          {"projection_dim", projection_dim},
          {"input_scale", input_scale},
          {"activation", "relu"}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.feature_dims = j.at("feature_dims").get<std::vector<int>>();
  c.temporal_kernels = j.at("temporal_kernels").get<std::vector<int>>();
  c.in_channels = j.at("in_channels").get<int>();
  c.projection_dim = j.at("projection_dim").get<int>();
  c.input_scale = j.value("input_scale", 1.0);
  if (j.value("activation", std::string("relu")) != "relu") throw ConfigError("only relu activation is supported");
  c.validate();
  return c;
}

namespace {

Eigen::MatrixXd kaiming_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

}  // namespace

SkeletonEncoder::SkeletonEncoder(const EncoderConfig& config, const SkeletonGraph& graph, std::uint64_t seed)
    : config_(config), graph_(graph), adjacency_(normalized_adjacency<double>(graph)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  int f_in = config_.in_channels;
  for (int l = 0; l < config_.num_blocks(); ++l) {
    const int f_out = config_.feature_dims[l];
    const std::string prefix = "block" + std::to_string(l) + ".";
    Block b;
    b.gcn_weight = {prefix + "gcn.weight", kaiming_uniform(f_in, f_out, f_in, rng)};
    b.gcn_bias = {prefix + "gcn.bias", Eigen::MatrixXd::Zero(1, f_out)};
    // Branch outputs are summed, so a unit's fan-in spans every branch's taps.
    int taps = 0;
    for (int k : config_.temporal_kernels) taps += k;
    for (int k : config_.temporal_kernels) {
      b.kernels.emplace_back(prefix + "tcn.k" + std::to_string(k), kaiming_uniform(k, f_out, taps, rng));
    }
    b.tcn_bias = {prefix + "tcn.bias", Eigen::MatrixXd::Zero(1, f_out)};
    blocks_.push_back(std::move(b));
    f_in = f_out;
  }
  // Affine head into the text space; the fan-in bound keeps initial logits small.
  const double bound = 1.0 / std::sqrt(static_cast<double>(f_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Eigen::MatrixXd w(f_in, config_.projection_dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = u(rng);
  proj_weight_ = {"proj.weight", std::move(w)};
  proj_bias_ = {"proj.bias", Eigen::MatrixXd::Zero(1, config_.projection_dim)};
}

Eigen::MatrixXd stack_joint_rows(const std::vector<const SkeletonSequence*>& batch, double scale) {
  if (batch.empty()) throw DimensionError("empty skeleton batch");
  const int frames = batch.front()->num_frames();
  const int joints = batch.front()->joints;
  const int channels = batch.front()->channels;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(batch.size()) * frames * joints, channels);
  Eigen::Index row = 0;
  for (const auto* seq : batch) {
    if (seq->num_frames() != frames || seq->joints != joints || seq->channels != channels) {
      throw DimensionError("skeleton batch mixes sequence shapes");
    }
    const SkeletonSequence centred = center_on_root(*seq);
    const Eigen::RowVectorXd mean_pose = centred.frames.cast<double>().colwise().mean();
    for (int t = 0; t < frames; ++t)
      for (int v = 0; v < joints; ++v, ++row)
        for (int c = 0; c < channels; ++c) x(row, c) = scale * (centred.at(t, v, c) - mean_pose(v * channels + c));
  }
  return x;
}

SkeletonEncoder::Output SkeletonEncoder::forward(const std::vector<const SkeletonSequence*>& batch) {
  for (const auto* seq : batch) seq->validate(graph_);
  const Eigen::Index n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd x0 = stack_joint_rows(batch, config_.input_scale);
  if (x0.cols() != config_.in_channels) throw DimensionError("sequence channels do not match encoder input");
  const Eigen::Index frames = batch.front()->num_frames();
  const Eigen::Index joints = graph_.num_joints();
  if (frames < config_.max_kernel()) throw ConfigError("sequence shorter than the largest temporal kernel");

  ad::Var h = ad::constant(std::move(x0));
  for (auto& b : blocks_) {
    h = ad::relu(ad::add_row(ad::graph_aggregate(ad::matmul(h, b.gcn_weight.var()), adjacency_), b.gcn_bias.var()));
    ad::Var mixed;
    for (auto& k : b.kernels) {
      ad::Var branch = ad::temporal_conv(h, k.var(), n, frames, joints);
      mixed = mixed.defined() ? ad::add(mixed, branch) : branch;
    }
    h = ad::relu(ad::add_row(mixed, b.tcn_bias.var()));
  }
  Output out;
  out.values = ad::mean_groups(h, joints);
  out.features = ad::mean_groups(out.values, frames);
  out.pooled = ad::l2_normalize_rows(ad::add_row(ad::matmul(out.features, proj_weight_.var()), proj_bias_.var()));
  return out;
}

SkeletonRepresentation SkeletonEncoder::encode(const SkeletonSequence& seq) {
  ad::NoGradGuard guard;
  Output out = forward({&seq});
  return {out.values.value(), out.pooled.value().row(0).transpose()};
}

std::vector<SkeletonRepresentation> SkeletonEncoder::encode_all(const std::vector<SkeletonSequence>& seqs, int chunk) {
  ad::NoGradGuard guard;
  std::vector<SkeletonRepresentation> reps;
  reps.reserve(seqs.size());
  std::size_t i = 0;
  while (i < seqs.size()) {
    // Chunks stop at a change of frame count so every forward sees one shape.
    std::vector<const SkeletonSequence*> batch{&seqs[i]};
    std::size_t j = i + 1;
    while (j < seqs.size() && static_cast<int>(batch.size()) < chunk && seqs[j].num_frames() == seqs[i].num_frames()) {
      batch.push_back(&seqs[j++]);
    }
    Output out = forward(batch);
    const Eigen::Index frames = seqs[i].num_frames();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto r = static_cast<Eigen::Index>(b);
      reps.push_back({out.values.value().middleRows(r * frames, frames), out.pooled.value().row(r).transpose()});
    }
    i = j;
  }
  return reps;
}

ad::ParameterRefs SkeletonEncoder::parameters() {
  ad::ParameterRefs refs;
  for (auto& b : blocks_) {
    refs.push_back(&b.gcn_weight);
    refs.push_back(&b.gcn_bias);
    for (auto& k : b.kernels) refs.push_back(&k);
    refs.push_back(&b.tcn_bias);
  }
  refs.push_back(&proj_weight_);
  refs.push_back(&proj_bias_);
  return refs;
}

void SkeletonEncoder::set_trainable(bool trainable) {
  for (auto* p : parameters()) p->trainable = trainable;
}

ParameterArchive SkeletonEncoder::checkpoint() const {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : graph_.edges()) edges.push_back({a, b});
  nlohmann::json header = {{"kind", "skeleton_encoder"},
                           {"config", config_.to_json()},
                           {"graph", {{"num_joints", graph_.num_joints()}, {"edges", edges}, {"names", graph_.joint_names()}}}};
  return make_archive(std::move(header), const_cast<SkeletonEncoder*>(this)->parameters());
}

void SkeletonEncoder::save(const std::filesystem::path& path) const { write_archive(path, checkpoint()); }

SkeletonEncoder SkeletonEncoder::load(const std::filesystem::path& path) {
  const ParameterArchive archive = read_archive(path);
  const auto& h = archive.header;
  if (h.value("kind", std::string()) != "skeleton_encoder") throw ConfigError("archive is not a skeleton encoder checkpoint");
  std::vector<std::pair<int, int>> edges;
  for (const auto& e : h.at("graph").at("edges")) edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  SkeletonGraph graph = SkeletonGraph::create(h.at("graph").at("num_joints").get<int>(), edges,
                                              h.at("graph").value("names", std::vector<std::string>{}));
  SkeletonEncoder enc(EncoderConfig::from_json(h.at("config")), graph);
  load_parameters(archive, enc.parameters());
  return enc;
}

}  // namespace sugar
