#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ecm/gradcheck.hpp"
#include "ecm/pipeline.hpp"
#include "ecm/report.hpp"

namespace {

constexpr int kExitError = 1;
constexpr int kExitBadConfig = 2;
constexpr int kExitMissingCheckpoint = 3;

ecm::RunConfig load_config_or_default(const std::string& path, uint64_t seed_override,
                                      bool seed_given) {
  ecm::RunConfig cfg;
  if (!path.empty()) cfg = ecm::load_run_config(path);
  if (seed_given) {
    cfg.seed = seed_override;
    cfg.sampler.seed = seed_override;
  }
  return cfg;
}

std::filesystem::path ensure_out_dir(const std::string& out) {
  std::filesystem::path dir = out.empty() ? std::filesystem::path(".") : std::filesystem::path(out);
  std::filesystem::create_directories(dir);
  return dir;
}

ecm::LoadedModel load_checkpoint_or_exit(const std::string& path) {
  if (path.empty() || !std::filesystem::exists(path)) {
    std::cerr << "error: checkpoint not found: " << (path.empty() ? "(none given)" : path) << "\n";
    std::exit(kExitMissingCheckpoint);
  }
  return ecm::load_model_checkpoint(path);
}

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw ecm::ConfigError("budget: empty alpha list");
  return out;
}

int cmd_pretrain(const ecm::RunConfig& cfg, const std::string& out, int samples, int steps,
                 double target_acc, double lr) {
  const auto dir = ensure_out_dir(out);
  const ecm::DerivedSeeds seeds = ecm::derive_seeds(cfg.seed);
  const ecm::TokenizedData data = ecm::build_tokenized_data(cfg, samples);
  ecm::BaseParameters base = ecm::BaseParameters::init(cfg.model, seeds.base_init);
  std::ofstream log(dir / "pretrain.csv");
  const ecm::PretrainResult result = ecm::run_pretrain(
      base, data.pretrain, steps, cfg.train.batch, lr, target_acc, seeds.pretrain, &log);
  ecm::save_base_checkpoint(base, data, (dir / "base.ckpt").string());
  std::cout << "pretrain: steps=" << result.steps << " loss=" << result.final_loss
            << " probe_accuracy=" << result.final_accuracy << "\n";
  return 0;
}

int cmd_train_control(const ecm::RunConfig& cfg, const std::string& out,
                      const std::string& checkpoint, int samples) {
  const auto dir = ensure_out_dir(out);
  ecm::LoadedModel model = load_checkpoint_or_exit(checkpoint);
  const ecm::DerivedSeeds seeds = ecm::derive_seeds(cfg.seed);
  const ecm::TokenizedData data = ecm::build_tokenized_data(cfg, samples);
  ecm::AdapterStack stack =
      ecm::init_adapter_from_base(model.base, cfg.anchors, cfg.ffn_groups, cfg.ffn_ratio,
                                  ecm::encoder_config_for(cfg), cfg.gate, seeds.adapter);
  std::ofstream csv(dir / "train_control.csv");
  const std::vector<ecm::EpochStats> epochs =
      ecm::run_control_training(model.base, stack, data.control, cfg.train, seeds.control, &csv);
  ecm::save_control_checkpoint(model.base, stack, data, (dir / "control.ckpt").string());
  std::cout << "train-control: epochs=" << epochs.size()
            << " final_loss=" << epochs.back().mean_loss << "\n";
  return 0;
}

int cmd_generate(const ecm::RunConfig& cfg, const std::string& out, const std::string& checkpoint,
                 int class_id, const std::string& condition_path, int sample_index) {
  const auto dir = ensure_out_dir(out);
  ecm::LoadedModel model = load_checkpoint_or_exit(checkpoint);
  const ecm::ScaleSchedule& sched = model.base.cfg.schedule;
  const int side = sched.latent_side() * model.embed.patch;

  ecm::ControlFeatures features;
  std::vector<uint8_t> condition_edges;
  if (model.has_stack) {
    ecm::Tensor condition;
    if (!condition_path.empty()) {
      int img_side = 0;
      const std::vector<double> img = ecm::read_pgm(condition_path, img_side);
      if (img_side != side) throw ecm::TensorError("generate: condition image side mismatch");
      condition_edges = ecm::extract_edges(img, side);
      condition = ecm::edges_tensor(condition_edges, side);
    } else {
      ecm::RunConfig data_cfg = cfg;
      data_cfg.model = model.base.cfg;
      const ecm::TokenizedData data = ecm::build_tokenized_data(data_cfg, sample_index + 1);
      const ecm::SyntheticSample& raw = data.raw[static_cast<size_t>(sample_index)];
      condition_edges = raw.edges;
      condition = data.control[static_cast<size_t>(sample_index)].condition;
      if (class_id < 0) class_id = raw.class_id % model.base.cfg.num_classes;
    }
    features = ecm::encode_condition(condition, model.stack.encoder, sched);
  }
  if (class_id < 0) class_id = 0;

  ecm::SamplerConfig sampler = cfg.sampler;
  ecm::GenerationTrace trace;
  const ecm::MultiScaleTokens tokens =
      ecm::generate(model.base, model.has_stack ? &model.stack : nullptr, class_id,
                    model.has_stack ? &features : nullptr, sampler, &trace);

  {
    std::ofstream tok(dir / "tokens.csv");
    tok << "scale,position,token\n";
    for (size_t k = 0; k < tokens.maps.size(); ++k)
      for (size_t i = 0; i < tokens.maps[k].size(); ++i)
        tok << k + 1 << ',' << i << ',' << tokens.maps[k][i] << '\n';
  }
  {
    std::ofstream tr(dir / "trace.csv");
    tr << "scale,temperature,mean_entropy\n";
    for (size_t k = 0; k < trace.temperature.size(); ++k)
      tr << k + 1 << ',' << trace.temperature[k] << ',' << trace.mean_entropy[k] << '\n';
  }
  const std::vector<double> image = ecm::tokens_to_image(tokens, sched, model.codebook, model.embed);
  ecm::write_pgm((dir / "image.pgm").string(), image, side);
  double f1 = -1.0;
  if (!condition_edges.empty())
    f1 = ecm::edge_f1(ecm::extract_edges(image, side), condition_edges, side);
  std::cout << "generate: class=" << class_id << " tokens=" << sched.total_tokens()
            << (f1 >= 0.0 ? " edge_f1=" + std::to_string(f1) : std::string()) << "\n";
  return 0;
}

int cmd_eval(const ecm::RunConfig& cfg, const std::string& out, const std::string& checkpoint,
             int count) {
  const auto dir = ensure_out_dir(out);
  ecm::LoadedModel model = load_checkpoint_or_exit(checkpoint);
  ecm::RunConfig data_cfg = cfg;
  data_cfg.model = model.base.cfg;
  // Held-out conditions: offset the dataset seed away from the training stream.
  data_cfg.seed = cfg.seed + 1;
  const ecm::TokenizedData data = ecm::build_tokenized_data(data_cfg, count);
  std::vector<int> indices(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) indices[static_cast<size_t>(i)] = i;

  ecm::SamplerConfig sampler = cfg.sampler;
  const ecm::GenerationEval controlled = ecm::evaluate_generations(
      model.base, model.has_stack ? &model.stack : nullptr, data, indices, sampler);
  const ecm::GenerationEval baseline =
      ecm::evaluate_generations(model.base, nullptr, data, indices, sampler);

  {
    std::ofstream csv(dir / "eval.csv");
    csv << "metric,value\n";
    csv << "edge_f1_controlled," << controlled.mean_f1 << '\n';
    csv << "edge_f1_baseline," << baseline.mean_f1 << '\n';
  }
  {
    std::ofstream csv(dir / "entropy.csv");
    csv << "scale,temperature,mean_entropy\n";
    for (size_t k = 0; k < controlled.mean_entropy.size(); ++k)
      csv << k + 1 << ',' << controlled.temperature[k] << ',' << controlled.mean_entropy[k] << '\n';
  }
  std::cout << "eval: edge_f1_controlled=" << controlled.mean_f1
            << " edge_f1_baseline=" << baseline.mean_f1 << "\n";
  return 0;
}

int cmd_budget(const ecm::RunConfig& cfg, const std::string& out, const std::string& alphas_text) {
  const auto dir = ensure_out_dir(out);
  const std::vector<double> alphas = parse_alpha_list(alphas_text);
  const std::vector<ecm::BudgetRow> rows = ecm::budget_report(cfg, alphas);
  ecm::write_budget_csv(rows, (dir / "budget.csv").string());
  ecm::write_budget_svg(rows, (dir / "budget.svg").string());
  std::cout << "budget: " << rows.size() << " rows -> " << (dir / "budget.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  using ecm::Tensor;
  ecm::Rng rng(seed);
  auto randn = [&rng](ecm::Shape shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * 0.5;
    t.set_requires_grad(true);
    return t;
  };

  struct Check {
    std::string name;
    double err;
  };
  std::vector<Check> checks;

  {
    Tensor a = randn({3, 4}), b = randn({4, 5});
    checks.push_back({"matmul", ecm::gradcheck_max_rel_error(
                                    [&] { return ecm::sum(ecm::matmul(a, b)); }, {a, b})});
  }
  {
    Tensor x = randn({4, 6});
    checks.push_back({"softmax", ecm::gradcheck_max_rel_error(
                                     [&] { return ecm::sum(ecm::mul(ecm::softmax(x, 1), x)); },
                                     {x})});
  }
  {
    Tensor x = randn({3, 5});
    checks.push_back(
        {"sigmoid", ecm::gradcheck_max_rel_error(
                        [&] { return ecm::sum(ecm::mul(ecm::sigmoid(x), x)); }, {x})});
  }
  {
    Tensor x = randn({3, 5});
    checks.push_back({"gelu", ecm::gradcheck_max_rel_error(
                                  [&] { return ecm::sum(ecm::mul(ecm::gelu(x), x)); }, {x})});
  }
  {
    Tensor x = randn({4, 6}), g = randn({6}), b = randn({6});
    checks.push_back({"layer_norm",
                      ecm::gradcheck_max_rel_error(
                          [&] { return ecm::sum(ecm::mul(ecm::layer_norm(x, g, b), x)); },
                          {x, g, b})});
  }
  {
    Tensor x = randn({5, 7});
    const std::vector<int> targets = {0, 3, 6, 2, 1};
    checks.push_back({"cross_entropy", ecm::gradcheck_max_rel_error(
                                           [&] { return ecm::cross_entropy(x, targets); }, {x})});
  }
  {
    Tensor x = randn({2, 2, 3});
    checks.push_back(
        {"resize_grid", ecm::gradcheck_max_rel_error(
                            [&] {
                              Tensor up = ecm::resize_grid(x, 4, 4, ecm::ResizeMode::Bilinear);
                              return ecm::sum(ecm::mul(up, up));
                            },
                            {x})});
  }
  {
    Tensor x = randn({6, 8});
    Tensor wq = randn({8, 8}), wk = randn({8, 8}), wv = randn({8, 8}), wo = randn({8, 8});
    Tensor bq = randn({8}), bk = randn({8}), bv = randn({8}), bo = randn({8});
    ecm::AttentionWeights w{wq, wk, wv, wo, bq, bk, bv, bo};
    Tensor bias({6, 6});
    checks.push_back({"attention",
                      ecm::gradcheck_max_rel_error(
                          [&] {
                            Tensor y = ecm::multihead_attention(x, w, bias, 2);
                            return ecm::sum(ecm::mul(y, x));
                          },
                          {x, wq, wk, wv, wo, bq, bk, bv, bo})});
  }
  {
    Tensor x = randn({5, 6});
    Tensor w1 = randn({6, 12}), b1 = randn({12}), w2 = randn({12, 6}), b2 = randn({6});
    Tensor gate = randn({12});
    ecm::SharedFFN ffn{w1, b1, w2, b2};
    checks.push_back({"gated_ffn",
                      ecm::gradcheck_max_rel_error(
                          [&] {
                            Tensor y = ecm::shared_gated_ffn(x, ffn, gate);
                            return ecm::sum(ecm::mul(y, x));
                          },
                          {x, w1, b1, w2, b2, gate})});
  }

  bool ok = true;
  for (const Check& c : checks) {
    const bool pass = c.err < 1e-4;
    ok = ok && pass;
    std::cout << "gradcheck " << c.name << ": max_rel_err=" << c.err
              << (pass ? " pass" : " FAIL") << "\n";
  }
  return ok ? 0 : kExitError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scale-autoregressive image model with a plug-in control stack"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, condition_path, alphas = "0,1,2,3,5";
  uint64_t seed = 0;
  bool seed_given = false;
  int samples = 256, steps = 2000, class_id = -1, sample_index = 0, eval_count = 32;
  double target_acc = 0.9, pretrain_lr = 1e-3;

  app.add_option("--config", config_path, "run configuration file (key=value)");
  app.add_option("--seed", seed, "seed override")->each([&](const std::string&) { seed_given = true; });
  app.add_option("--out", out_dir, "output directory");

  CLI::App* pretrain = app.add_subcommand("pretrain", "train the frozen-to-be base model");
  pretrain->add_option("--samples", samples, "dataset size");
  pretrain->add_option("--steps", steps, "max optimizer steps");
  pretrain->add_option("--target-acc", target_acc, "early-stop probe accuracy");
  pretrain->add_option("--lr", pretrain_lr, "pretraining learning rate");

  CLI::App* train_control = app.add_subcommand("train-control", "train the control stack");
  train_control->add_option("--checkpoint", checkpoint_path, "base checkpoint");
  train_control->add_option("--samples", samples, "dataset size");

  CLI::App* generate = app.add_subcommand("generate", "sample a conditioned image");
  generate->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  generate->add_option("--class", class_id, "class id (default: from condition sample)");
  generate->add_option("--condition", condition_path, "condition image (PGM)");
  generate->add_option("--sample-index", sample_index, "synthetic condition index");

  CLI::App* eval_cmd = app.add_subcommand("eval", "edge agreement and entropy over held-out set");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  eval_cmd->add_option("--count", eval_count, "held-out generations");

  CLI::App* budget = app.add_subcommand("budget", "token/FLOP budget report");
  budget->add_option("--alphas", alphas, "comma-separated truncation exponents");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference sweep of every op");

  for (CLI::App* sub : {pretrain, train_control, generate, eval_cmd, budget, gradcheck})
    sub->fallthrough();  // --config/--seed/--out may follow the subcommand

  CLI11_PARSE(app, argc, argv);

  try {
    const ecm::RunConfig cfg = load_config_or_default(config_path, seed, seed_given);
    if (pretrain->parsed())
      return cmd_pretrain(cfg, out_dir, samples, steps, target_acc, pretrain_lr);
    if (train_control->parsed()) return cmd_train_control(cfg, out_dir, checkpoint_path, samples);
    if (generate->parsed())
      return cmd_generate(cfg, out_dir, checkpoint_path, class_id, condition_path, sample_index);
    if (eval_cmd->parsed()) return cmd_eval(cfg, out_dir, checkpoint_path, eval_count);
    if (budget->parsed()) return cmd_budget(cfg, out_dir, alphas);
    if (gradcheck->parsed()) return cmd_gradcheck(cfg.seed + 17);
  } catch (const ecm::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
