// vct: change-detection pipeline CLI.
//
// Subcommands: train, eval, predict, synth, inspect. Each accepts a
// key=value config file via --config; command-line flags override it.
// Exit codes: 0 success, 2 usage/configuration error, 3 numeric failure.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vct/data.hpp"
#include "vct/metrics.hpp"
#include "vct/model.hpp"
#include "vct/png_io.hpp"
#include "vct/train.hpp"

namespace fs = std::filesystem;

namespace {

struct ModelOpts {
  int k = 1000;
  int l = 10;
  int gnn_layers = 1;
  int knn = 8;
  int heads = 8;
  bool use_rtm = true;
  bool use_te = true;
  bool use_td = true;
  bool gcn_aux = false;
  std::uint64_t seed = 0;

  vct::ModelConfig config() const {
    vct::ModelConfig cfg;
    cfg.rtm.topk = k;
    cfg.rtm.clusters = l;
    cfg.rtm.gcn_layers = gnn_layers;
    cfg.rtm.knn = knn;
    cfg.rtm.seed = seed;
    cfg.heads = heads;
    cfg.use_rtm = use_rtm;
    cfg.use_te = use_te;
    cfg.use_td = use_td;
    cfg.gcn_aux = gcn_aux;
    cfg.seed = seed;
    return cfg;
  }
};

struct SynthOpts {
  int size = 64;
  int count = 200;
  int val_count = 50;
  int min_shapes = 2;
  int max_shapes = 5;
  double brightness = 0.1;
  double noise = 0.02;
  std::uint64_t seed = 7;

  vct::SyntheticConfig config() const {
    vct::SyntheticConfig c;
    c.size = size;
    c.min_shapes = min_shapes;
    c.max_shapes = max_shapes;
    c.brightness_jitter = brightness;
    c.noise_std = noise;
    c.seed = seed;
    return c;
  }
};

void add_model_flags(CLI::App* app, ModelOpts& mo) {
  app->add_option("--k", mo.k, "Top-K unchanged positions mined by RTM")
      ->capture_default_str();
  app->add_option("--l", mo.l, "Anchor tokens per branch")
      ->capture_default_str();
  app->add_option("--gnn-layers", mo.gnn_layers, "GCN depth in RTM")
      ->capture_default_str();
  app->add_option("--knn", mo.knn, "Spatial graph stencil size")
      ->capture_default_str()
      ->check([](const std::string& v) -> std::string {
        if (v != "4" && v != "8" && v != "16")
          return "knn must be one of 4, 8, 16";
        return "";
      });
  app->add_option("--heads", mo.heads, "Attention heads")
      ->capture_default_str();
  app->add_option("--use-rtm", mo.use_rtm, "Reliable token mining on/off")
      ->capture_default_str();
  app->add_option("--use-te", mo.use_te, "Token transformer (SA+CA) on/off")
      ->capture_default_str();
  app->add_option("--use-td", mo.use_td, "Anchor-primary refinement on/off")
      ->capture_default_str();
  app->add_option("--gcn-aux", mo.gcn_aux,
                  "Train GCN weights with auxiliary coarse BCE")
      ->capture_default_str();
  app->add_option("--seed", mo.seed, "Run seed")->capture_default_str();
}

void add_synth_flags(CLI::App* app, SynthOpts& so) {
  app->add_option("--size", so.size, "Synthetic image size")
      ->capture_default_str();
  app->add_option("--count", so.count, "Synthetic training pairs")
      ->capture_default_str();
  app->add_option("--val-count", so.val_count, "Synthetic validation pairs")
      ->capture_default_str();
  app->add_option("--min-shapes", so.min_shapes, "Minimum shapes per pair")
      ->capture_default_str();
  app->add_option("--max-shapes", so.max_shapes, "Maximum shapes per pair")
      ->capture_default_str();
  app->add_option("--brightness", so.brightness, "Brightness jitter on B")
      ->capture_default_str();
  app->add_option("--noise", so.noise, "Gaussian pixel noise sigma")
      ->capture_default_str();
  app->add_option("--synth-seed", so.seed, "Synthetic generator seed")
      ->capture_default_str();
}

// key=value lines, '#' comments; returns extra "--key=value" tokens for
// options the command line did not already set. Unknown keys are fatal.
std::vector<std::string> config_tokens(CLI::App* sub,
                                       const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::vector<std::string> extra;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key=value");
    const std::string key = line.substr(0, eq);
    auto* opt = sub->get_option_no_throw("--" + key);
    if (!opt)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": unknown config key '" + key + "'");
    if (opt->count() == 0)  // flags on the command line win
      extra.push_back("--" + key + "=" + line.substr(eq + 1));
  }
  return extra;
}

std::vector<vct::ImagePair> tile_all(const std::vector<vct::ImagePair>& pairs,
                                     int patch) {
  std::vector<vct::ImagePair> out;
  for (const auto& p : pairs) {
    if (p.height <= patch && p.width <= patch) {
      out.push_back(p);
    } else {
      auto t = vct::tile(p, patch);
      out.insert(out.end(), t.begin(), t.end());
    }
  }
  return out;
}

// root/{A,B,label}/<id>.png; label optional per image
std::vector<vct::ImagePair> load_directory(const std::string& root,
                                           int split_filter) {
  const fs::path a_dir = fs::path(root) / "A";
  const fs::path b_dir = fs::path(root) / "B";
  const fs::path l_dir = fs::path(root) / "label";
  if (!fs::is_directory(a_dir) || !fs::is_directory(b_dir))
    throw std::runtime_error("dataset root must contain A/ and B/: " + root);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a_dir))
    if (e.path().extension() == ".png") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());
  std::vector<vct::ImagePair> out;
  for (const auto& n : names) {
    const std::string id = fs::path(n).stem();
    if (split_filter >= 0 && vct::split_of(id) != split_filter) continue;
    const auto lp = l_dir / n;
    auto pair = vct::load_pair(a_dir / n, b_dir / n,
                               fs::exists(lp) ? lp.string() : "");
    pair.id = id;
    out.push_back(std::move(pair));
  }
  return out;
}

std::vector<vct::ImagePair> synth_range(const SynthOpts& so, int first,
                                        int count) {
  std::vector<vct::ImagePair> out;
  out.reserve(count);
  const auto cfg = so.config();
  for (int i = 0; i < count; ++i)
    out.push_back(vct::generate_synthetic_pair(cfg, first + i));
  return out;
}

void write_csv(const std::string& path,
               const std::vector<vct::EpochRecord>& hist) {
  std::ofstream out(path);
  out << "epoch,loss,precision,recall,f1,iou,oa\n";
  for (const auto& r : hist)
    out << r.epoch << ',' << r.loss << ',' << r.val_metrics.precision << ','
        << r.val_metrics.recall << ',' << r.val_metrics.f1 << ','
        << r.val_metrics.iou << ',' << r.val_metrics.oa << '\n';
}

template <class T>
int run_train(const ModelOpts& mo, const SynthOpts& so,
              const vct::TrainConfig& tc, const std::string& data_dir,
              bool use_synth, const std::string& out_dir, int patch) {
  std::vector<vct::ImagePair> train_set, val_set;
  if (use_synth) {
    train_set = synth_range(so, 0, so.count);
    val_set = synth_range(so, so.count, so.val_count);
  } else {
    train_set = tile_all(load_directory(data_dir, 0), patch);
    val_set = tile_all(load_directory(data_dir, 1), patch);
  }
  if (train_set.empty()) {
    std::cerr << "error: no training pairs\n";
    return 2;
  }
  fs::create_directories(out_dir);
  auto m = vct::build_model<T>(mo.config());
  const auto ckpt = (fs::path(out_dir) / "vct.ckpt").string();
  auto hist = vct::train_loop(m, train_set, val_set, tc, ckpt, &std::cout);
  write_csv((fs::path(out_dir) / "history.csv").string(), hist);
  std::cout << "best checkpoint: " << ckpt << "\n";
  return 0;
}

template <class T>
int run_eval(const ModelOpts& mo, const SynthOpts& so,
             const std::string& ckpt, const std::string& data_dir,
             bool use_synth, int split, int first, const std::string& out_file,
             int patch) {
  auto m = vct::build_model<T>(mo.config());
  vct::load_checkpoint(m.params, ckpt);
  std::vector<vct::ImagePair> data =
      use_synth ? synth_range(so, first, so.count)
                : tile_all(load_directory(data_dir, split), patch);
  if (data.empty()) {
    std::cerr << "error: no evaluation pairs\n";
    return 2;
  }
  for (const auto& p : data)
    if (!p.has_label()) {
      std::cerr << "error: pair " << p.id << " has no label\n";
      return 2;
    }
  auto report = vct::evaluate(m, data);
  std::cout << vct::format_report(report);
  if (!out_file.empty()) {
    std::ofstream out(out_file);
    out << vct::format_report_kv(report);
  }
  return 0;
}

int run_predict(const ModelOpts& mo, const std::string& ckpt,
                const std::string& path_a, const std::string& path_b,
                const std::string& out_png, const std::string& coarse_png,
                const std::string& prob_raw) {
  auto m = vct::build_model<double>(mo.config());
  vct::load_checkpoint(m.params, ckpt);
  auto pair = vct::load_pair(path_a, path_b);
  const int f = m.cfg.encoder.downsample_factor();
  if (pair.height % f != 0 || pair.width % f != 0) {
    std::cerr << "error: image extents must be divisible by " << f << "\n";
    return 2;
  }
  vct::Tape<double> tape;
  vct::PipelineTrace<double> tr;
  auto a = vct::image_tensor<double>(pair.a, pair.height, pair.width);
  auto b = vct::image_tensor<double>(pair.b, pair.height, pair.width);
  auto probs = vct::forward_pipeline(tape, m, a, b, &tr);

  auto mask = vct::hard_mask(probs);
  vct::ImageU8 img;
  img.height = pair.height;
  img.width = pair.width;
  img.channels = 1;
  img.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    img.pixels[i] = mask[i] ? 255 : 0;
  vct::write_png(out_png, img);

  if (!coarse_png.empty()) {
    if (tr.coarse.empty()) {
      std::cerr << "error: --dump-coarse requires --use-rtm 1\n";
      return 2;
    }
    vct::ImageU8 cm;
    cm.height = tr.x1->shape[0];
    cm.width = tr.x1->shape[1];
    cm.channels = 1;
    cm.pixels.resize(tr.coarse.size());
    for (std::size_t i = 0; i < tr.coarse.size(); ++i)
      cm.pixels[i] =
          static_cast<std::uint8_t>(std::lround(255.0 * tr.coarse[i]));
    vct::write_png(coarse_png, cm);
  }
  if (!prob_raw.empty()) {
    std::ofstream out(prob_raw, std::ios::binary);
    auto put_u32 = [&](std::uint32_t v) {
      unsigned char b4[4] = {static_cast<unsigned char>(v),
                             static_cast<unsigned char>(v >> 8),
                             static_cast<unsigned char>(v >> 16),
                             static_cast<unsigned char>(v >> 24)};
      out.write(reinterpret_cast<char*>(b4), 4);
    };
    put_u32(static_cast<std::uint32_t>(pair.height));
    put_u32(static_cast<std::uint32_t>(pair.width));
    for (double v : probs->value) {
      const float fv = static_cast<float>(v);
      std::uint32_t bits;
      static_assert(sizeof(bits) == sizeof(fv));
      std::memcpy(&bits, &fv, 4);
      put_u32(bits);
    }
  }
  return 0;
}

int run_synth(const SynthOpts& so, const std::string& out_dir) {
  const fs::path root(out_dir);
  fs::create_directories(root / "A");
  fs::create_directories(root / "B");
  fs::create_directories(root / "label");
  const auto cfg = so.config();
  for (int i = 0; i < so.count; ++i) {
    auto pair = vct::generate_synthetic_pair(cfg, i);
    auto to_u8 = [&](const std::vector<float>& px) {
      vct::ImageU8 img;
      img.height = pair.height;
      img.width = pair.width;
      img.channels = 3;
      img.pixels.resize(px.size());
      for (std::size_t j = 0; j < px.size(); ++j)
        img.pixels[j] = static_cast<std::uint8_t>(
            std::lround(255.0 * std::clamp(px[j], 0.0f, 1.0f)));
      return img;
    };
    const std::string name = pair.id + ".png";
    vct::write_png(root / "A" / name, to_u8(pair.a));
    vct::write_png(root / "B" / name, to_u8(pair.b));
    vct::ImageU8 lab;
    lab.height = pair.height;
    lab.width = pair.width;
    lab.channels = 1;
    lab.pixels.resize(pair.label.size());
    for (std::size_t j = 0; j < pair.label.size(); ++j)
      lab.pixels[j] = pair.label[j] ? 255 : 0;
    vct::write_png(root / "label" / name, lab);
  }
  std::cout << "wrote " << so.count << " pairs to " << out_dir << "\n";
  return 0;
}

template <class T>
void print_stage(const std::string& name, const vct::Ptr<T>& t) {
  if (!t) return;
  double lo = 1e300, hi = -1e300, mean = 0;
  for (auto v : t->value) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
    mean += static_cast<double>(v);
  }
  mean /= static_cast<double>(t->value.size());
  std::cout << name << " shape " << vct::shape_str(t->shape) << " min " << lo
            << " mean " << mean << " max " << hi << "\n";
}

int run_inspect(const ModelOpts& mo, const std::string& ckpt,
                const std::string& path_a, const std::string& path_b) {
  auto m = vct::build_model<double>(mo.config());
  if (!ckpt.empty()) vct::load_checkpoint(m.params, ckpt);
  auto pair = vct::load_pair(path_a, path_b);
  const int f = m.cfg.encoder.downsample_factor();
  if (pair.height % f != 0 || pair.width % f != 0) {
    std::cerr << "error: image extents must be divisible by " << f << "\n";
    return 2;
  }
  vct::Tape<double> tape;
  vct::PipelineTrace<double> tr;
  auto a = vct::image_tensor<double>(pair.a, pair.height, pair.width);
  auto b = vct::image_tensor<double>(pair.b, pair.height, pair.width);
  vct::forward_pipeline(tape, m, a, b, &tr);
  print_stage("X1", tr.x1);
  print_stage("X2", tr.x2);
  if (!tr.coarse.empty()) {
    double lo = 1e300, hi = -1e300, mean = 0;
    for (auto v : tr.coarse) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      mean += v;
    }
    std::cout << "P shape [" << tr.coarse.size() << " 1] min " << lo
              << " mean " << mean / tr.coarse.size() << " max " << hi << "\n";
    std::cout << "F selected " << tr.indices.size() << " positions\n";
  }
  print_stage("T1", tr.t1);
  print_stage("T1~", tr.t1r);
  print_stage("X1'", tr.x1p);
  print_stage("pred", tr.probs);
  const bool finite = vct::all_finite(*tr.probs);
  std::cout << "finite: " << (finite ? "yes" : "no") << "\n";
  return finite ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VcT change detection"};
  app.require_subcommand(1);

  ModelOpts mo;
  SynthOpts so;
  vct::TrainConfig tc;
  tc.epochs = 30;
  std::string data_dir, out_dir = "out", ckpt, out_file;
  std::string path_a, path_b, out_png = "mask.png", coarse_png, prob_raw;
  bool use_synth = false, f64 = false;
  int threads = 1, patch = 256, split = 2, first = 0;

  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--lr", tc.lr0, "Initial learning rate")
        ->capture_default_str();
    c->add_option("--momentum", tc.momentum, "SGD momentum")
        ->capture_default_str();
    c->add_option("--wd", tc.weight_decay, "Weight decay")
        ->capture_default_str();
    c->add_option("--batch", tc.batch_size, "Batch size")
        ->capture_default_str();
    c->add_option("--epochs", tc.epochs, "Training epochs")
        ->capture_default_str();
  };
  std::string config_path;
  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path,
                  "key=value config file; flags override");
    add_model_flags(c, mo);
    c->add_option("--threads", threads, "Worker threads")
        ->capture_default_str();
    c->add_flag("--f64", f64, "64-bit floating point pipeline");
    c->add_option("--patch", patch, "Tile size for large images")
        ->capture_default_str();
  };

  auto* t = app.add_subcommand("train", "Train a model");
  add_common(t);
  add_train_flags(t);
  add_synth_flags(t, so);
  t->add_option("--data", data_dir, "Dataset root with A/ B/ label/");
  t->add_flag("--synth", use_synth, "Train on generated synthetic pairs");
  t->add_option("--out", out_dir, "Output directory")->capture_default_str();

  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(e);
  add_synth_flags(e, so);
  e->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  e->add_option("--data", data_dir, "Dataset root with A/ B/ label/");
  e->add_flag("--synth", use_synth, "Evaluate on generated synthetic pairs");
  e->add_option("--split", split,
                "Hash split to evaluate: 0 train, 1 val, 2 test, -1 all")
      ->capture_default_str();
  e->add_option("--first", first, "First synthetic index")
      ->capture_default_str();
  e->add_option("--out", out_file, "Also write the report as key=value");

  auto* p = app.add_subcommand("predict", "Predict a change mask");
  add_common(p);
  p->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  p->add_option("--a", path_a, "Before image")->required();
  p->add_option("--b", path_b, "After image")->required();
  p->add_option("--out", out_png, "Mask PNG path")->capture_default_str();
  p->add_option("--dump-coarse", coarse_png, "Coarse map PNG path");
  p->add_option("--dump-prob", prob_raw, "Raw probability dump path");

  auto* s = app.add_subcommand("synth", "Write synthetic pairs as PNGs");
  s->add_option("--config", config_path,
                "key=value config file; flags override");
  add_synth_flags(s, so);
  s->add_option("--out", out_dir, "Output dataset root")
      ->capture_default_str();

  auto* i = app.add_subcommand("inspect", "Print per-stage shapes and stats");
  add_common(i);
  i->add_option("--ckpt", ckpt, "Checkpoint path (random init if absent)");
  i->add_option("--a", path_a, "Before image")->required();
  i->add_option("--b", path_b, "After image")->required();

  try {
    app.parse(argc, argv);
    if (!config_path.empty()) {
      CLI::App* sub = app.get_subcommands().front();
      auto extra = config_tokens(sub, config_path);
      if (!extra.empty()) {
        std::vector<std::string> tokens;
        for (int j = 1; j < argc; ++j) tokens.push_back(argv[j]);
        tokens.insert(tokens.end(), extra.begin(), extra.end());
        std::reverse(tokens.begin(), tokens.end());
        app.parse(tokens);
      }
    }
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }

  vct::set_num_threads(threads);
  tc.seed = mo.seed;
  try {
    if (t->parsed())
      return f64 ? run_train<double>(mo, so, tc, data_dir, use_synth, out_dir,
                                     patch)
                 : run_train<float>(mo, so, tc, data_dir, use_synth, out_dir,
                                    patch);
    if (e->parsed())
      return f64 ? run_eval<double>(mo, so, ckpt, data_dir, use_synth, split,
                                    first, out_file, patch)
                 : run_eval<float>(mo, so, ckpt, data_dir, use_synth, split,
                                   first, out_file, patch);
    if (p->parsed())
      return run_predict(mo, ckpt, path_a, path_b, out_png, coarse_png,
                         prob_raw);
    if (s->parsed()) return run_synth(so, out_dir);
    if (i->parsed()) return run_inspect(mo, ckpt, path_a, path_b);
  } catch (const vct::NumericFailure& ex) {
    std::cerr << "numeric failure: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 2;
}
